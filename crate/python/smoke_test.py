"""Smoke test for the cat_py extension module.

Build and run from the repository root:

    cargo build --release -p cat-py --features extension-module
    cp target/release/libcat_py.so python/cat_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import cat_py  # noqa: E402

TINY = """
seed = 0

[dataset]
seed = 3
n_seen_classes = 3
n_unseen_classes = 1
train_samples = 8
eval_samples = 4
image_size = 64
query_size = 32
min_glyph = 16.0
max_glyph = 28.0
max_query_instances = 2
max_distractors = 2

[detector]
image_size = 64
query_size = 32
backbone_channels = [4, 4, 8, 8]
anchor_sizes = [16.0, 32.0]
train_proposals = 8
test_proposals = 8

[detector.cat]
d_model = 16
heads = 2
layers = 2
d_ff = 64

[train]
epochs = 1
batch_size = 2
warmup_steps = 2
"""


def check(name, cond):
    print(f"{name}: {'ok' if cond else 'FAILED'}")
    if not cond:
        sys.exit(1)


def main():
    check("hand AP of a perfect detection", cat_py.average_precision([(0, [0, 0, 10, 10], 0.9)], [[[0, 0, 10, 10]]]) == 1.0)
    check("hand AP of a miss", cat_py.average_precision([(0, [50, 50, 60, 60], 0.9)], [[[0, 0, 10, 10]]]) == 0.0)

    d = 16
    per_stream = 4 * d * d + 2 * d * 4 * d + 4 * d + d + 4 * d
    check("closed-form CAT params", cat_py.closed_form_cat_params(d, 3, 4 * d) == 3 * 2 * per_stream)

    pe = cat_py.position_encoding(4, 5, 8)
    check("position encoding shape", len(pe) == 20 and all(len(r) == 8 for r in pe))
    check("position encoding range", all(abs(v) <= 1.0 for r in pe for v in r))

    check("desk config text", "[detector.cat]" in cat_py.desk_config())

    det = cat_py.Detector()
    check("desk detector has CAT params", 0 < det.cat_params < det.num_params)

    with tempfile.TemporaryDirectory() as root:
        data = os.path.join(root, "data")
        digest = cat_py.gen_data(data, TINY)
        check("manifest digest", len(digest) == 64)
        check("regenerated dataset is identical", cat_py.gen_data(data, TINY, force=True) == digest)

        ds = cat_py.Dataset(data)
        unseen = ds.ids("unseen")
        check("dataset splits", len(ds) == 16 and len(unseen) == 4)
        s = ds.sample(unseen[0])
        check("sample image size", len(s["target"]) == 3 * s["height"] * s["width"])

        run = os.path.join(root, "run")
        losses = cat_py.train(data, run, TINY)
        check("one epoch of training", len(losses) == 1 and math.isfinite(losses[0]))

        ap, ap50 = cat_py.evaluate(os.path.join(run, "checkpoint.bin"), data, os.path.join(root, "eval"))
        check("eval metrics in range", 0.0 <= ap <= ap50 <= 1.0)

        model = cat_py.Detector(TINY)
        model.load(os.path.join(run, "checkpoint.bin"))
        args = (s["target"], s["height"], s["width"], s["query"], s["query_height"], s["query_width"])
        dets = model.detect(*args)
        check("detections are scored boxes", all(len(x) == 5 and x[0] <= x[2] and x[1] <= x[3] for x in dets))
        maps = model.response_maps(*args)
        check("one response map per layer plus input", len(maps) == 3 and len(maps[0]) == 4)

        try:
            cat_py.Dataset(os.path.join(root, "missing"))
            check("missing dataset raises", False)
        except OSError:
            check("missing dataset raises", True)
        try:
            cat_py.Detector("bogus = 1")
            check("bad config raises", False)
        except ValueError:
            check("bad config raises", True)

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
