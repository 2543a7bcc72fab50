"""Command line entry points: synth, curate, train, eval and infer.

Every flag can also be given in a plain ``key = value`` config file passed
with ``--config`` (flag names with dashes replaced by underscores, plus any
training key understood by :func:`multigran.harness.config.apply_overrides`).
Flags on the command line win over the file; ``MULTIGRAN_SEED`` wins over both.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .curation import (RESPONSE_SETTINGS, CurationReport, HttpCaptioner, caption_images, curate,
                       load_annotation_set, save_annotation_set, write_sft)
from .harness.config import SEED_ENV, DataConfig, ModelConfig, load_config, read_config_file
from .harness.data import style_captioners
from .synth import SynthSpec, synth_generate

log = logging.getLogger("multigran")

# Keys that belong to a subcommand rather than to the training configuration.
COMMAND_KEYS = {
    "synth": {"out", "num_images", "image_size"},
    "curate": {"in", "captions", "out", "neg_budget", "response_setting"},
    "train": set(),
    "eval": {"checkpoint", "metrics", "report", "overlay_dir"},
    "infer": {"checkpoint", "mode", "labels", "expr", "image", "image_index", "out_dir", "score_threshold"},
}


def _seed_from(value, env) -> int:
    return int(env[SEED_ENV]) if env.get(SEED_ENV) else int(value if value is not None else 0)


def _settings(args, command: str, env) -> tuple[dict, dict]:
    """Merge config file and flags; returns (command settings, training overrides)."""
    items = read_config_file(args.config) if getattr(args, "config", None) else {}
    items = {k.strip().lower().replace("-", "_"): v.strip() for k, v in items.items()}
    own = {k: items.pop(k) for k in list(items) if k in COMMAND_KEYS[command]}
    for key, val in vars(args).items():
        if key in ("command", "config", "func", "set") or val is None:
            continue
        if key in COMMAND_KEYS[command]:
            own[key] = val
        else:
            items[key] = str(val)
    for pair in getattr(args, "set", None) or []:
        k, sep, v = pair.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {pair!r}")
        items[k.strip()] = v.strip()
    return own, items


def _get(own: dict, key: str, default=None, cast=None):
    val = own.get(key, default)
    if val is None or cast is None:
        return val
    return cast(val)


# --------------------------------------------------------------------------- commands

def cmd_synth(args, env) -> int:
    own, items = _settings(args, "synth", env)
    seed = _seed_from(items.get("seed"), env)
    spec = SynthSpec(image_size=_get(own, "image_size", 128, int), num_images=_get(own, "num_images", 16, int),
                     seed=seed)
    ds = synth_generate(spec)
    out = Path(_get(own, "out", "data/synth"))
    path = save_annotation_set(out / "annotations.json", ds.images, ds.categories, spec.is_thing,
                               [(p.image_index, p.expression, p.annotation_index) for p in ds.referring])
    print(json.dumps({"annotations": path, "images": len(ds.images), "referring": len(ds.referring)}))
    return 0


def _png_bytes(img) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.asarray(img.image)).save(buf, format="PNG")
    return buf.getvalue()


def cmd_curate(args, env) -> int:
    own, items = _settings(args, "curate", env)
    if not own.get("in") or not own.get("out"):
        raise SystemExit("curate needs --in and --out")
    seed = _seed_from(items.get("seed"), env)
    aset = load_annotation_set(own["in"])
    source = _get(own, "captions", "mock")
    if source == "mock":
        captioners, payload = style_captioners(aset.categories), None
    else:
        captioners, payload = [HttpCaptioner(u.strip()) for u in source.split(",") if u.strip()], _png_bytes
    report = CurationReport()
    images = caption_images(aset.images, captioners, report=report, image_payload=payload)
    budget = own.get("neg_budget")
    budget = None if budget in (None, "", "none") else int(budget)
    setting = _get(own, "response_setting", "caption")
    if setting not in RESPONSE_SETTINGS:
        raise SystemExit(f"unknown response setting {setting!r}")
    samples = curate(images, aset.categories, aset.referring, seed, budget, setting, report)
    n = write_sft(own["out"], samples)
    print(json.dumps({"written": n, "skipped": len(report.skipped),
                      "caption_failures": len(report.caption_failures),
                      "rejected_captions": dict(report.rejected_captions)}))
    return 0


def cmd_train(args, env) -> int:
    from .harness.train import run_stage

    _, items = _settings(args, "train", env)
    cfg = load_config(overrides=items, env=env)
    out = Path(cfg.out_dir)
    if cfg.stage == 2 and not cfg.init and not cfg.resume and (out / "stage1.pt").exists():
        cfg.init = str(out / "stage1.pt")
        log.info("stage 2 initialized from %s", cfg.init)
    _, state = run_stage(cfg, out)
    print(json.dumps({"stage": cfg.stage, "steps": state.step, "first_loss": state.losses[0] if state.losses else None,
                      "last_loss": state.losses[-1] if state.losses else None, "checkpoints": state.checkpoints}))
    return 0


def _load_session(checkpoint: str, items: dict, env):
    """Session whose model, data and seed come from the checkpoint."""
    from .harness.train import Session, load_params, read_checkpoint

    ck = read_checkpoint(checkpoint)
    c = ck["config"]
    items = {k: v for k, v in items.items() if k not in ("seed",)}
    cfg = load_config(overrides={"scale": c["scale"], **items}, env={})
    cfg.seed = c["seed"]
    cfg.model = ModelConfig(**c["model"])
    cfg.data = DataConfig(**c["data"])
    cfg.stage1 = replace(cfg.stage1, image_size=c["image_size"])
    cfg.stage2 = replace(cfg.stage2, image_size=c["image_size"])
    sess = Session(cfg, vocab=ck["vocab"])
    load_params(sess.model, ck["params"])
    sess.invalidate()
    sess.model.eval()
    return sess


def cmd_eval(args, env) -> int:
    from .harness.infer import METRICS, evaluate, write_report

    own, items = _settings(args, "eval", env)
    if not own.get("checkpoint"):
        raise SystemExit("eval needs --checkpoint")
    metrics = [m.strip() for m in str(_get(own, "metrics", ",".join(METRICS))).split(",") if m.strip()]
    sess = _load_session(own["checkpoint"], items, env)
    rep = evaluate(sess, metrics, own.get("overlay_dir"))
    if own.get("report"):
        write_report(own["report"], rep)
    print(json.dumps(rep, sort_keys=True))
    return 0


def cmd_infer(args, env) -> int:
    from .harness.infer import infer, save_overlay

    own, items = _settings(args, "infer", env)
    if not own.get("checkpoint"):
        raise SystemExit("infer needs --checkpoint")
    sess = _load_session(own["checkpoint"], items, env)
    mode = _get(own, "mode", "word")
    if own.get("image"):
        from PIL import Image

        image = np.asarray(Image.open(own["image"]).convert("RGB"))
        name = Path(own["image"]).stem
    else:
        idx = _get(own, "image_index", 0, int)
        image, name = sess.images[idx].image, sess.images[idx].image_id
    labels = [s.strip() for s in own["labels"].split(",") if s.strip()] if own.get("labels") else None
    if mode == "word" and labels is None:
        labels = list(sess.ds.categories)
    res = infer(sess.model, sess.tok, image, mode, labels=labels, expression=own.get("expr"),
                image_size=sess.image_size, score_threshold=_get(own, "score_threshold", 0.5, float))
    out_dir = Path(_get(own, "out_dir", "runs/infer"))
    overlay = save_overlay(out_dir / f"{name}-{mode}.png", image, res.detections)
    print(json.dumps({
        "mode": mode, "caption": res.caption, "overlay": overlay,
        "detections": [{"query": d.query, "label": d.label, "score": round(d.score, 6),
                        "box_cxcywh": [round(v, 6) for v in d.box.as_array().tolist()],
                        "mask_area": int(d.mask.data.sum())} for d in res.detections],
    }))
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multigran", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="plain key = value file mirroring the flags")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config key (repeatable)")

    s = sub.add_parser("synth", help="generate the synthetic benchmark and write annotations.json")
    common(s)
    s.add_argument("--out")
    s.add_argument("--num-images", type=int)
    s.add_argument("--image-size", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("curate", help="caption, refine and write SFT JSONL")
    common(s)
    s.add_argument("--in", dest="in")
    s.add_argument("--captions", help="'mock' or comma-separated caption endpoint URLs")
    s.add_argument("--out")
    s.add_argument("--neg-budget", type=int)
    s.add_argument("--response-setting", choices=RESPONSE_SETTINGS)
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("train", help="run training stage 1 or 2")
    common(s)
    s.add_argument("--stage", type=int, choices=(1, 2))
    s.add_argument("--scale", choices=("desk", "full"))
    s.add_argument("--out-dir")
    s.add_argument("--init", help="stage 1 checkpoint for stage 2")
    s.add_argument("--resume", help="checkpoint of the same stage to continue")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--num-queries", type=int)
    s.add_argument("--num-stuff-queries", type=int)
    s.add_argument("--query-selection", choices=("on", "off"))
    s.add_argument("--denoising", choices=("on", "off"))
    s.add_argument("--decoder-layers", type=int)
    s.add_argument("--sampling-points", type=int)
    s.add_argument("--response-setting", choices=RESPONSE_SETTINGS)
    s.add_argument("--neg-budget", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics on the training set of a checkpoint")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--metrics", help="comma-separated subset of pq,miou,ciou,acc")
    s.add_argument("--report", help="write the metrics as JSON here")
    s.add_argument("--overlay-dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="caption and perceive one image")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--mode", choices=("word", "sentence"))
    s.add_argument("--labels", help="comma-separated category names (word mode)")
    s.add_argument("--expr", help="referring expression (sentence mode)")
    s.add_argument("--image", help="RGB image file; default: a training image")
    s.add_argument("--image-index", type=int)
    s.add_argument("--score-threshold", type=float)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_infer)
    return p


def main(argv: Optional[Sequence[str]] = None, env=None) -> int:
    env = os.environ if env is None else env
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(message)s")
    del args.log_level
    return args.func(args, env)


if __name__ == "__main__":
    sys.exit(main())
