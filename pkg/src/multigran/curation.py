"""Turn perception annotations into unified instruction-tuning samples.

Each sample carries a task description, an instruction and a response of the
form ``"<caption>. The perception result is <PER>"``. Captions come from
pluggable caption sources and are filtered before use; word lists are
shuffled and padded with sampled negative categories on every draw.
"""
from __future__ import annotations

import base64
import json
import logging
import math
import re
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import jsonschema
import numpy as np

from .core import Annotation, BinaryMask, Box, LabeledImage, rle_decode, rle_encode

log = logging.getLogger(__name__)

SUMMARY_TOKEN = "<PER>"
WORD_TASK = ("Please identify all objects according to the given phrase list. "
             "This is all the candidate phrases.")
SENTENCE_TASK = "Please identify the target according to the following instruction."
RESPONSE_SUFFIX = f"The perception result is {SUMMARY_TOKEN}"

DEFAULT_BANNED = ("indicate", "might", "may", "imply", "perhaps", "possibly")
DEFAULT_MIN_LEN = 5
DEFAULT_MAX_LEN = 128
DEFAULT_ENTROPY_MIN = 3.0
DEFAULT_CHAR_CAP = 2000
MAX_CAPTIONS = 4

RESPONSE_SETTINGS = ("caption", "none", "objects")


class CurationError(ValueError):
    pass


class SampleSkipped(CurationError):
    """The sample cannot be built (e.g. no caption survived refinement)."""


class SchemaError(CurationError):
    def __init__(self, line: int, field_name: str, message: str):
        super().__init__(f"line {line}: field '{field_name}': {message}")
        self.line = line
        self.field = field_name


@dataclass(frozen=True)
class SftSample:
    task_kind: str
    task_description: str
    instruction: str
    response: str
    image_ref: str
    targets: tuple = ()
    positive_labels: tuple = ()
    negative_labels: tuple = ()

    def __post_init__(self):
        if self.task_kind not in ("word_based", "sentence_based"):
            raise CurationError(f"unknown task kind {self.task_kind!r}")
        if self.response.count(SUMMARY_TOKEN) != 1:
            raise CurationError("response must contain exactly one summary token")
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "positive_labels", tuple(self.positive_labels))
        object.__setattr__(self, "negative_labels", tuple(self.negative_labels))

    @property
    def candidate_labels(self) -> list[str]:
        """Labels in instruction order (word-based) or the expression itself (sentence-based)."""
        if self.task_kind == "word_based":
            return self.instruction.split(", ")
        return [self.instruction]

    @property
    def caption(self) -> str:
        head = self.response[: -len(RESPONSE_SUFFIX)]
        return head[:-2] if head.endswith(". ") else head.strip()


def format_response(caption: Optional[str]) -> str:
    if not caption:
        return RESPONSE_SUFFIX
    return f"{caption.strip().rstrip('.').rstrip()}. {RESPONSE_SUFFIX}"


# --------------------------------------------------------------------------- captions

@dataclass(frozen=True)
class CaptionRecord:
    image_ref: str
    captions: tuple = ()          # (source_id, text) pairs
    accepted: tuple = ()          # one flag per caption
    reasons: tuple = ()           # rejection reason per caption, None when accepted
    failures: tuple = ()          # (source_id, error text) for sources that failed

    @property
    def accepted_texts(self) -> list[str]:
        return [t for (_, t), ok in zip(self.captions, self.accepted) if ok]

    @property
    def empty(self) -> bool:
        return len(self.captions) == 0


class MockCaptioner:
    """Deterministic caption source. ``fn`` maps ``(image_ref, image)`` to a list of captions."""

    def __init__(self, source_id: str, fn: Union[str, Callable] = "a toy scene with two squares"):
        self.source_id = source_id
        self._fn = fn

    def caption(self, image_ref: str, image=None) -> list[str]:
        if callable(self._fn):
            out = self._fn(image_ref, image)
        else:
            out = self._fn
        return [out] if isinstance(out, str) else list(out)


class HttpCaptioner:
    """Caption source behind a JSON endpoint.

    Request body: ``{"image_id": ..., "image_b64": ...}`` (``image_b64`` only
    when raw image bytes are supplied). Response body: ``{"captions": [...]}``.
    """

    def __init__(self, url: str, source_id: Optional[str] = None, timeout: float = 30.0):
        self.url = url
        self.source_id = source_id or url
        self.timeout = timeout

    def caption(self, image_ref: str, image: Optional[bytes] = None) -> list[str]:
        body = {"image_id": image_ref}
        if isinstance(image, (bytes, bytearray)):
            body["image_b64"] = base64.b64encode(bytes(image)).decode("ascii")
        req = urllib.request.Request(
            self.url, data=json.dumps(body).encode("utf-8"),
            headers={"Content-Type": "application/json"}, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        caps = payload.get("captions")
        if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
            raise CurationError(f"bad captioner response from {self.url}: {payload!r}")
        return caps


def request_captions(image_ref: str, captioners, image=None, max_in_flight: int = 4) -> CaptionRecord:
    """Collect up to four distinct captions from the given sources.

    A failing source is logged and skipped; if every source fails the record
    is returned with an empty caption list and the failures filled in.
    """
    if not isinstance(captioners, (list, tuple)):
        captioners = [captioners]

    def ask(src):
        try:
            return src, src.caption(image_ref, image), None
        except Exception as exc:  # network errors, timeouts, bad payloads
            return src, None, exc

    with ThreadPoolExecutor(max_workers=max(1, min(max_in_flight, len(captioners)))) as pool:
        results = list(pool.map(ask, captioners))

    seen = set()
    captions, failures = [], []
    for src, caps, exc in results:
        if exc is not None:
            log.warning("caption source %s failed for %s: %s", src.source_id, image_ref, exc)
            failures.append((src.source_id, f"{type(exc).__name__}: {exc}"))
            continue
        for text in caps:
            text = text.strip()
            if not text or text in seen:
                continue
            seen.add(text)
            captions.append((src.source_id, text))
    captions = captions[:MAX_CAPTIONS]
    if not captions:
        log.warning("no captions for %s", image_ref)
    return CaptionRecord(image_ref, tuple(captions), tuple(True for _ in captions),
                         tuple(None for _ in captions), tuple(failures))


_WORD_RE = re.compile(r"[a-z']+")


def char_entropy(text: str) -> float:
    """Shannon entropy in bits/char of the lowercase letter distribution."""
    letters = [c for c in text.lower() if "a" <= c <= "z"]
    if not letters:
        return 0.0
    n = len(letters)
    return -sum((k / n) * math.log2(k / n) for k in Counter(letters).values())


def caption_rejection(text: str, min_len=DEFAULT_MIN_LEN, max_len=DEFAULT_MAX_LEN,
                      entropy_min=DEFAULT_ENTROPY_MIN, banned: Sequence[str] = DEFAULT_BANNED) -> Optional[str]:
    """First failing filter, checked in the order banned word, entropy, length.

    Returns ``"banned:<word>"`` (first banned word in reading order),
    ``"entropy"`` or ``"length"``; ``None`` if the caption is clean.
    """
    banned_set = {b.lower() for b in banned}
    for w in _WORD_RE.findall(text.lower()):
        if w in banned_set:
            return f"banned:{w}"
    if char_entropy(text) < entropy_min:
        return "entropy"
    if not (min_len <= len(text.split()) <= max_len):
        return "length"
    return None


def refine_captions(rec: CaptionRecord, min_len=DEFAULT_MIN_LEN, max_len=DEFAULT_MAX_LEN,
                    entropy_min=DEFAULT_ENTROPY_MIN, banned: Sequence[str] = DEFAULT_BANNED) -> CaptionRecord:
    reasons = tuple(caption_rejection(t, min_len, max_len, entropy_min, banned) for _, t in rec.captions)
    accepted = tuple(r is None for r in reasons)
    if rec.captions and not any(accepted):
        log.info("all captions rejected for %s: %s", rec.image_ref, reasons)
    return replace(rec, accepted=accepted, reasons=reasons)


# --------------------------------------------------------------------------- word lists

def shuffle_and_sample(positives: Sequence[str], negative_pool: Sequence[str], budget_labels: int,
                       rng_seed, char_cap: int = DEFAULT_CHAR_CAP) -> list[str]:
    """All positives plus up to ``budget_labels - len(positives)`` sampled negatives, shuffled."""
    positives = list(dict.fromkeys(positives))
    if budget_labels < len(positives):
        raise CurationError(f"label budget {budget_labels} < {len(positives)} positives")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    pos_set = set(positives)
    pool = [n for n in dict.fromkeys(negative_pool) if n not in pos_set]
    k = min(budget_labels - len(positives), len(pool))
    negatives = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)] if k > 0 else []
    while negatives and len(", ".join(positives + negatives)) > char_cap:
        negatives.pop()
    labels = positives + negatives
    order = rng.permutation(len(labels))
    return [labels[i] for i in order]


# --------------------------------------------------------------------------- sample builders

def _pick_caption(img: LabeledImage, rng: np.random.Generator, setting: str, categories=None) -> Optional[str]:
    if setting == "none":
        return None
    if setting == "objects":
        names = sorted({(categories[a.label] if categories is not None and isinstance(a.label, int) else str(a.label))
                        for a in img.annotations})
        return ", ".join(names)
    if not img.captions:
        raise SampleSkipped(f"{img.image_id}: no accepted caption")
    return img.captions[int(rng.integers(len(img.captions)))]


def _named_targets(anns, categories) -> tuple:
    out = []
    for a in anns:
        label = categories[a.label] if isinstance(a.label, (int, np.integer)) else a.label
        out.append(replace(a, label=label))
    return tuple(out)


def build_word_sample(img: LabeledImage, vocab: Sequence[str], rng_seed, neg_budget: Optional[int] = None,
                      response_setting: str = "caption", keep_targets=None) -> SftSample:
    """Word-based sample: instruction is the shuffled comma-joined candidate list.

    ``vocab`` maps category indices to names. ``neg_budget`` caps the total
    number of labels in the instruction (default: the whole vocabulary).
    ``keep_targets`` optionally filters annotations (e.g. things only).
    """
    if not vocab:
        raise CurationError("empty vocabulary")
    anns = [a for a in img.annotations if keep_targets is None or keep_targets(a)]
    if not anns:
        raise CurationError(f"{img.image_id}: no category annotations")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    for a in anns:
        if not isinstance(a.label, (int, np.integer)) or not 0 <= a.label < len(vocab):
            raise CurationError(f"{img.image_id}: label {a.label!r} not covered by vocabulary")
    positives = sorted({vocab[a.label] for a in anns}, key=list(vocab).index)
    pool = [v for v in vocab if v not in positives]
    budget = len(vocab) if neg_budget is None else max(neg_budget, len(positives))
    labels = shuffle_and_sample(positives, pool, budget, rng)
    caption = _pick_caption(img, rng, response_setting, vocab)
    return SftSample(
        task_kind="word_based",
        task_description=WORD_TASK,
        instruction=", ".join(labels),
        response=format_response(caption),
        image_ref=img.image_id,
        targets=_named_targets(anns, vocab),
        positive_labels=tuple(positives),
        negative_labels=tuple(l for l in labels if l not in positives),
    )


def build_sentence_sample(img: LabeledImage, expression: str, target: Annotation, rng_seed,
                          response_setting: str = "caption", categories=None) -> SftSample:
    expression = expression.strip()
    if not expression:
        raise CurationError("empty referring expression")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    caption = _pick_caption(img, rng, response_setting, categories)
    return SftSample(
        task_kind="sentence_based",
        task_description=SENTENCE_TASK,
        instruction=expression,
        response=format_response(caption),
        image_ref=img.image_id,
        targets=(replace(target, label=expression),),
        positive_labels=(expression,),
        negative_labels=(),
    )


# --------------------------------------------------------------------------- JSONL

_ANN_SCHEMA = {
    "type": "object",
    "required": ["label", "box", "mask", "is_thing", "has_mask"],
    "properties": {
        "label": {"type": ["string", "integer"]},
        "box": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
        "mask": {
            "type": "object",
            "required": ["size", "counts"],
            "properties": {
                "size": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "counts": {"type": "string"},
            },
        },
        "is_thing": {"type": "boolean"},
        "has_mask": {"type": "boolean"},
    },
}

SFT_SCHEMA = {
    "type": "object",
    "required": ["task_kind", "task_description", "instruction", "response", "image_ref",
                 "targets", "positive_labels", "negative_labels"],
    "properties": {
        "task_kind": {"enum": ["word_based", "sentence_based"]},
        "task_description": {"type": "string"},
        "instruction": {"type": "string"},
        "response": {"type": "string"},
        "image_ref": {"type": "string"},
        "targets": {"type": "array", "items": _ANN_SCHEMA},
        "positive_labels": {"type": "array", "items": {"type": "string"}},
        "negative_labels": {"type": "array", "items": {"type": "string"}},
    },
}


def annotation_to_json(a: Annotation) -> dict:
    return {
        "label": a.label if isinstance(a.label, str) else int(a.label),
        "box": [a.box.cx, a.box.cy, a.box.w, a.box.h],
        "mask": {"size": [a.mask.height, a.mask.width], "counts": rle_encode(a.mask)},
        "is_thing": bool(a.is_thing),
        "has_mask": bool(a.has_mask),
    }


def annotation_from_json(d: dict) -> Annotation:
    h, w = d["mask"]["size"]
    return Annotation(label=d["label"], box=Box(*d["box"]), mask=rle_decode(d["mask"]["counts"], h, w),
                      is_thing=d["is_thing"], has_mask=d["has_mask"])


def sample_to_json(s: SftSample) -> dict:
    return {
        "task_kind": s.task_kind,
        "task_description": s.task_description,
        "instruction": s.instruction,
        "response": s.response,
        "image_ref": s.image_ref,
        "targets": [annotation_to_json(a) for a in s.targets],
        "positive_labels": list(s.positive_labels),
        "negative_labels": list(s.negative_labels),
    }


def sample_from_json(d: dict, line: int = 0) -> SftSample:
    try:
        jsonschema.validate(d, SFT_SCHEMA)
    except jsonschema.ValidationError as err:
        if err.validator == "required":
            missing = re.search(r"'([^']+)' is a required property", err.message)
            name = ".".join(str(p) for p in [*err.path, missing.group(1) if missing else "?"])
        else:
            name = ".".join(str(p) for p in err.path) or "<record>"
        raise SchemaError(line, name, err.message) from None
    try:
        return SftSample(
            task_kind=d["task_kind"], task_description=d["task_description"], instruction=d["instruction"],
            response=d["response"], image_ref=d["image_ref"],
            targets=tuple(annotation_from_json(a) for a in d["targets"]),
            positive_labels=tuple(d["positive_labels"]), negative_labels=tuple(d["negative_labels"]),
        )
    except (CurationError, ValueError) as err:
        raise SchemaError(line, "<record>", str(err)) from None


def write_sft(path, samples: Iterable[SftSample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_sft(path) -> Iterator[SftSample]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
            except json.JSONDecodeError as err:
                raise SchemaError(lineno, "<json>", str(err)) from None
            yield sample_from_json(d, lineno)


@dataclass
class AnnotationSet:
    """Images with annotations, the category list and referring triples, as read from disk."""

    images: list
    categories: list
    is_thing: dict
    referring: list            # (image_index, expression, annotation_index)


def save_annotation_set(path, images: Sequence[LabeledImage], categories: Sequence[str], is_thing: dict,
                        referring=()) -> str:
    """Write ``annotations.json`` plus one PNG per image under ``images/`` next to it."""
    from PIL import Image

    path = Path(path)
    (path.parent / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for img in images:
        rel = f"images/{img.image_id}.png"
        Image.fromarray(np.asarray(img.image)).save(path.parent / rel)
        records.append({"image_id": img.image_id, "file": rel, "captions": list(img.captions),
                        "meta": img.meta, "annotations": [annotation_to_json(a) for a in img.annotations]})
    doc = {"version": 1, "categories": list(categories),
           "is_thing": [bool(is_thing.get(i, True)) for i in range(len(categories))],
           "images": records, "referring": [list(r) for r in referring]}
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return str(path)


def load_annotation_set(path) -> AnnotationSet:
    from PIL import Image

    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("version") != 1:
        raise CurationError(f"{path}: unsupported annotation file version {doc.get('version')!r}")
    images = []
    for rec in doc["images"]:
        arr = np.asarray(Image.open(path.parent / rec["file"]).convert("RGB"))
        images.append(LabeledImage(arr, tuple(annotation_from_json(a) for a in rec["annotations"]),
                                   tuple(rec.get("captions", ())), rec["image_id"], rec.get("meta", {})))
    referring = [(int(i), str(e), int(a)) for i, e, a in doc.get("referring", [])]
    return AnnotationSet(images, list(doc["categories"]), dict(enumerate(doc["is_thing"])), referring)


# --------------------------------------------------------------------------- pipeline

@dataclass
class CurationReport:
    written: int = 0
    skipped: list = field(default_factory=list)
    caption_failures: list = field(default_factory=list)
    rejected_captions: Counter = field(default_factory=Counter)


def caption_images(images: Sequence[LabeledImage], captioners, refine_kwargs=None,
                   report: Optional[CurationReport] = None, image_payload=None) -> list[LabeledImage]:
    """Attach accepted captions (at most four) to each image."""
    out = []
    for img in images:
        payload = image_payload(img) if image_payload is not None else img
        rec = refine_captions(request_captions(img.image_id, captioners, payload), **(refine_kwargs or {}))
        if report is not None:
            report.caption_failures.extend((img.image_id, s, e) for s, e in rec.failures)
            report.rejected_captions.update(r.split(":")[0] for r in rec.reasons if r)
        out.append(replace(img, captions=tuple(rec.accepted_texts[:MAX_CAPTIONS])))
    return out


def curate(images: Sequence[LabeledImage], categories: Sequence[str], referring, seed: int,
           neg_budget: Optional[int] = None, response_setting: str = "caption",
           report: Optional[CurationReport] = None) -> list[SftSample]:
    """One word-based sample per image plus one sentence-based sample per referring pair.

    ``referring`` is a sequence of ``(image_index, expression, annotation_index)``.
    Samples that cannot be built are skipped and listed in ``report``.
    """
    report = report if report is not None else CurationReport()
    rng = np.random.default_rng(seed)
    samples = []
    for img in images:
        try:
            samples.append(build_word_sample(img, categories, rng, neg_budget, response_setting))
        except CurationError as err:
            report.skipped.append((img.image_id, str(err)))
    for image_index, expression, ann_index in referring:
        img = images[image_index]
        try:
            samples.append(build_sentence_sample(img, expression, img.annotations[ann_index], rng,
                                                 response_setting, categories))
        except CurationError as err:
            report.skipped.append((img.image_id, str(err)))
    report.written = len(samples)
    return samples
