"""
Curating instruction data from a labeled synthetic set
======================================================

Generate a handful of synthetic images, caption them with the mock
captioners, refine the captions and turn everything into SFT samples.
Run with ``python3 demos/curation_walkthrough.py``.
"""
import tempfile
from pathlib import Path

from multigran.curation import (CaptionRecord, CurationReport, caption_rejection, curate, read_sft,
                                refine_captions, write_sft)
from multigran.harness.data import caption_dataset
from multigran.synth import SynthSpec, synth_generate

# A small scene set: each image has things (circles, squares, ...) and stuff (sky, grass, ...).
ds = synth_generate(SynthSpec(num_images=4, seed=0, image_size=128))
print("categories:", ", ".join(ds.categories))
print("referring expressions:", len(ds.referring))

# Refinement drops speculative or low-quality captions and keeps the rest in order.
record = CaptionRecord("demo", (("a", "a red circle on green grass"),
                                ("b", "the shapes might indicate a game"),
                                ("c", "aaaaaaaaaaaa")))
for _, text in record.captions:
    print(f"{text!r:40} -> {caption_rejection(text) or 'kept'}")
print("refined:", refine_captions(record).accepted_texts)

# Caption every image with the mock captioners and build SFT samples.
images = caption_dataset(ds)
report = CurationReport()
samples = curate(images, ds.categories,
                 [(p.image_index, p.expression, p.annotation_index) for p in ds.referring],
                 seed=0, neg_budget=2, report=report)
word = next(s for s in samples if s.task_kind == "word_based")
sentence = next(s for s in samples if s.task_kind == "sentence_based")
print("\nword-level sample")
print("  instruction:", word.instruction)
print("  response:   ", word.response)
print("  targets:    ", list(word.positive_labels), "negatives:", list(word.negative_labels))
print("sentence-level sample")
print("  instruction:", sentence.instruction)
print("  response:   ", sentence.response)

# The JSONL file is the hand-off to training; reading it back gives the same samples.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "sft.jsonl"
    n = write_sft(path, samples)
    assert list(read_sft(path)) == samples
    print(f"\nwrote and re-read {n} samples ({path.stat().st_size} bytes)")
