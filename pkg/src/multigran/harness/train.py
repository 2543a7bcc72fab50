"""Two-stage training: schedule, freezing, the step losses, checkpoints and resume."""
from __future__ import annotations

import io
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch

from ..backbones import SPECIALS, MultiScaleFeatures, Tokenizer, letterbox, lm_loss, pad_ids
from ..decoder import build_denoising
from ..objective import total_loss
from ..synth import SynthSpec, synth_generate
from .config import RunConfig, StageConfig
from .data import (MixSampler, Stage2Data, caption_corpus, caption_dataset, caption_sequence, step_rng,
                   tokenizer_texts, torch_generator)
from .model import PerceptionModel

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Optional[str]):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


def lr_at(step: int, total: int, warmup: int, peak: float, floor: float = 0.0) -> float:
    """Linear warmup to ``peak`` at ``step == warmup``, cosine decay to ``floor`` at ``step == total``."""
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    t = min(max(step - warmup, 0), total - warmup) / (total - warmup)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class RunState:
    stage: int
    seed: int
    step: int = 0                                  # completed optimizer updates
    losses: list = field(default_factory=list)     # total loss per step
    reports: list = field(default_factory=list)    # (step, {term: value}) every log_every steps
    checkpoints: list = field(default_factory=list)


# --------------------------------------------------------------------------- session

def vocab_words(tok: Tokenizer) -> list[str]:
    return tok.itos[len(SPECIALS) + 256:]


class Session:
    """Data, tokenizer, model and cached frozen-encoder features for one run."""

    def __init__(self, cfg: RunConfig, vocab: Optional[list] = None):
        self.cfg = cfg
        size = cfg.current.image_size
        self.image_size = size
        self.grid = size // 4
        self.ds = synth_generate(SynthSpec(image_size=size, num_images=cfg.data.num_images, seed=cfg.seed))
        self.images = caption_dataset(self.ds)
        self.corpus_images, self.corpus = caption_corpus(cfg.seed, cfg.data.caption_images, size)
        if vocab is None:
            texts = tokenizer_texts(self.images, self.corpus_images, categories=self.ds.categories,
                                    expressions=[p.expression for p in self.ds.referring])
            self.tok = Tokenizer.build(texts)
        else:
            self.tok = Tokenizer(vocab)
        torch.manual_seed(cfg.seed)
        self.model = PerceptionModel(cfg.model, len(self.tok))
        self.n_visual = self.model.n_visual(size)
        self.data = Stage2Data(self.ds, self.images, self.tok, self.n_visual, self.grid,
                               cfg.data.response_setting, cfg.data.neg_budget)
        self._cache: dict[str, list] = {}
        self.optimizer = None

    def pixels(self, which: str) -> torch.Tensor:
        imgs = self.images if which == "train" else self.corpus_images
        return torch.stack([letterbox(img.image, self.image_size)[0] for img in imgs])

    def features(self, which: str) -> list:
        """Frozen encoder output per image (the encoder is never trained)."""
        if which not in self._cache:
            x = self.pixels(which)
            with torch.no_grad():
                feats = self.model.encoder(x)
            self._cache[which] = [feats.stride4, *feats.levels]
        return self._cache[which]

    def gather(self, which: str, index: list[int]) -> MultiScaleFeatures:
        s4, *levels = self.features(which)
        idx = torch.as_tensor(index, dtype=torch.long)
        return MultiScaleFeatures([l[idx] for l in levels], s4[idx])

    def invalidate(self):
        self._cache.clear()


# --------------------------------------------------------------------------- losses

def stage1_loss(sess: Session, cfg: StageConfig, step: int):
    rng = step_rng(sess.cfg.seed, step)
    picks = rng.integers(len(sess.corpus), size=cfg.batch_size)
    pairs = [sess.corpus[int(i)] for i in picks]
    seqs = [caption_sequence(sess.tok, cap, sess.n_visual) for _, cap in pairs]
    feats = sess.gather("corpus", [i for i, _ in pairs])
    out = sess.model.lm(sess.model.visual_tokens(feats), pad_ids(seqs))
    llm = lm_loss(out.logits, seqs)
    return cfg.weights.llm * llm, {"llm": llm}


def stage2_loss(sess: Session, cfg: StageConfig, step: int, sampler: MixSampler):
    m = sess.model
    items = []
    for slot in range(cfg.batch_size):
        source, index, rng = sampler.draw(step, slot)
        items.append(sess.data.item(source, index, rng))
    seqs = [it.seq for it in items]
    feats = sess.gather("train", [it.image_index for it in items])
    lm_out = m.lm(m.visual_tokens(feats), pad_ids(seqs))
    llm = lm_loss(lm_out.logits, seqs)
    memory, pixel_map = m.decoder.encode_memory(feats)
    total = cfg.weights.llm * llm
    report = {"llm": llm}
    B = len(items)
    mc = sess.cfg.model
    for i, it in enumerate(items):
        gen = torch_generator(sess.cfg.seed, step, i)
        dn = build_denoising(it.targets.boxes, it.targets.labels, it.num_labels, mc.dn_groups,
                             mc.box_noise, mc.label_noise, generator=gen)
        out = m.perceive(lm_out.hidden[i], it.seq, [v[i] for v in memory], pixel_map[i], it.mode,
                         it.panoptic, dn if len(dn) else None)
        t, rep = total_loss(out, it.targets, cfg.weights)
        total = total + t / B
        for k, v in rep.items():
            report[k] = report[k] + v / B if k in report else v / B
    return total, report


# --------------------------------------------------------------------------- checkpoints

def _atomic_save(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(path, sess: Session, state: RunState, optimizer=None) -> str:
    path = Path(path)
    _atomic_save({
        "format_version": FORMAT_VERSION,
        "params": sess.model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "state": asdict(state),
        "config": {"model": asdict(sess.cfg.model), "data": asdict(sess.cfg.data),
                   "seed": sess.cfg.seed, "scale": sess.cfg.scale, "image_size": sess.image_size},
        "vocab": vocab_words(sess.tok),
    }, path)
    return str(path)


def read_checkpoint(path) -> dict:
    try:
        blob = Path(path).read_bytes()
        ck = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {type(exc).__name__}: {exc}") from exc
    if not isinstance(ck, dict) or "format_version" not in ck:
        raise CheckpointError(f"{path} is not a checkpoint")
    if ck["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {ck['format_version']}, expected {FORMAT_VERSION}")
    for key in ("params", "state", "config", "vocab"):
        if key not in ck:
            raise CheckpointError(f"{path}: missing {key!r}")
    return ck


def load_params(model: torch.nn.Module, params: dict, components=None) -> None:
    """Copy parameters in, all at once; ``components`` restricts to name prefixes."""
    own = model.state_dict()
    if components is not None:
        params = {k: v for k, v in params.items() if k.split(".", 1)[0] in components}
        missing = [k for k in own if k.split(".", 1)[0] in components and k not in params]
    else:
        missing = [k for k in own if k not in params]
    unexpected = [k for k in params if k not in own]
    bad = [k for k, v in params.items() if k in own and own[k].shape != v.shape]
    if missing or unexpected or bad:
        raise CheckpointError(f"parameter mismatch: missing={missing[:5]} unexpected={unexpected[:5]} shape={bad[:5]}")
    merged = dict(own)
    merged.update(params)
    model.load_state_dict(merged)


def session_from_checkpoint(cfg: RunConfig, path, components=None) -> tuple[Session, dict]:
    ck = read_checkpoint(path)
    sess = Session(cfg, vocab=ck["vocab"])
    load_params(sess.model, ck["params"], components)
    sess.invalidate()
    return sess, ck


# --------------------------------------------------------------------------- loop

def make_optimizer(params, cfg: StageConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)


def log_report(step: int, report: dict) -> None:
    for key, v in report.items():
        layer, _, term = key.rpartition(".")
        log.info("step=%d term=%s layer=%s value=%.6f", step, term, layer or "-", float(v))


def train(sess: Session, cfg: StageConfig, state: Optional[RunState] = None, out_dir=None,
          optimizer_state: Optional[dict] = None, stop_at: Optional[int] = None,
          callback: Optional[Callable] = None) -> RunState:
    """Run stage ``cfg.stage`` from ``state.step`` up to ``cfg.steps`` (or ``stop_at``)."""
    state = state or RunState(cfg.stage, sess.cfg.seed)
    params = sess.model.set_trainable(cfg.trainable)
    sess.model.train()
    opt = make_optimizer(params, cfg)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    sampler = MixSampler(sess.data.sources, cfg.mix, sess.cfg.seed) if cfg.stage == 2 else None
    out_dir = Path(out_dir) if out_dir else None
    last_good = None
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    t0 = time.time()
    while state.step < end:
        step = state.step
        lr = lr_at(step + 1, cfg.steps, cfg.warmup_steps, cfg.lr, cfg.lr * cfg.min_lr_ratio)
        for g in opt.param_groups:
            g["lr"] = lr
        if cfg.stage == 1:
            loss, report = stage1_loss(sess, cfg, step)
        else:
            loss, report = stage2_loss(sess, cfg, step, sampler)
        if not torch.isfinite(loss):
            if out_dir is not None:
                last_good = save_checkpoint(out_dir / f"stage{cfg.stage}-last-good.pt", sess, state, opt)
            raise TrainingDiverged(step, last_good)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        state.step += 1
        state.losses.append(float(loss.detach()))
        if cfg.log_every and (state.step % cfg.log_every == 0 or state.step == 1):
            rep = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in report.items()}
            state.reports.append((state.step, rep))
            log.info("stage=%d step=%d loss=%.5f lr=%.3g elapsed=%.1fs", cfg.stage, state.step, state.losses[-1],
                     lr, time.time() - t0)
            log_report(state.step, rep)
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            state.checkpoints.append(save_checkpoint(out_dir / f"stage{cfg.stage}-step{state.step}.pt",
                                                     sess, state, opt))
        if callback is not None:
            callback(state)
    if out_dir is not None and state.step >= cfg.steps:
        state.checkpoints.append(save_checkpoint(out_dir / f"stage{cfg.stage}.pt", sess, state, opt))
    sess.model.eval()
    sess.optimizer = opt
    return state


def run_stage(cfg: RunConfig, out_dir=None) -> tuple[Session, RunState]:
    """Stage 1 from scratch, or stage 2 from ``cfg.init`` (stage 1 checkpoint); ``cfg.resume`` continues a run."""
    stage_cfg = cfg.current
    if cfg.resume:
        sess, ck = session_from_checkpoint(cfg, cfg.resume)
        state = RunState(**ck["state"])
        if state.stage != cfg.stage:
            raise CheckpointError(f"cannot resume stage {cfg.stage} from a stage {state.stage} checkpoint")
        return sess, train(sess, stage_cfg, state, out_dir, ck["optimizer"])
    if cfg.stage == 2 and cfg.init:
        sess, _ = session_from_checkpoint(cfg, cfg.init, components=("encoder", "connector", "lm"))
    else:
        sess = Session(cfg)
    return sess, train(sess, stage_cfg, None, out_dir)


def snapshot(model: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def changed_params(before: dict, after: dict) -> list[str]:
    return [k for k in before if not torch.equal(before[k], after[k])]
