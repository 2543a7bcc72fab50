"""
Word-level and sentence-level inference
=======================================

Load a stage 2 checkpoint (or train a tiny one), then ask for a panoptic
answer with a list of category names and for a single object with a
referring expression. Masks are printed in run-length form.

    python3 demos/inference.py [path/to/stage2.pt]
"""
import sys
import tempfile
from pathlib import Path

from multigran.core import rle_encode
from multigran.harness import load_config, run_stage
from multigran.harness.infer import infer, save_overlay
from multigran.harness.train import session_from_checkpoint

tiny = {}
if len(sys.argv) > 1:
    ckpt = Path(sys.argv[1])
else:
    ckpt_dir = Path(tempfile.mkdtemp(prefix="multigran-infer-"))
    tiny = {"data.num_images": 4, "stage1.steps": 10, "stage2.steps": 30}
    run_stage(load_config(overrides={"stage": 1, **tiny}, env={}), ckpt_dir)
    run_stage(load_config(overrides={"stage": 2, "init": str(ckpt_dir / "stage1.pt"), **tiny}, env={}), ckpt_dir)
    ckpt = ckpt_dir / "stage2.pt"

sess, _ = session_from_checkpoint(load_config(overrides={"stage": 2, **tiny}, env={}), ckpt)
sess.model.eval()
image = sess.images[0].image

# Word mode: the instruction is a list of category names; each kept query is a segment.
res = infer(sess.model, sess.tok, image, "word", labels=sess.ds.categories, image_size=sess.image_size)
print("caption:", res.caption)
for d in res.detections:
    runs = rle_encode(d.mask)
    print(f"  {d.label:9s} score {d.score:.2f}  box {d.box.as_array().round(3)}  rle {runs[:40]}...")
if not res.detections:
    print("  no segment above the score threshold (a short run may not have learned any yet)")
print("overlay:", save_overlay(ckpt.parent / "word.png", image, res.detections))

# Sentence mode: one expression, one answer (the best-scoring query).
expr = sess.ds.referring[0].expression
res = infer(sess.model, sess.tok, image, "sentence", expression=expr, image_size=sess.image_size)
d = res.detections[0]
print(f"\n{expr!r}: score {d.score:.2f}, box {d.box.as_array().round(3)}, {int(d.mask.data.sum())} pixels")
