"""Quick check that the extension imports and the main entry points work.

Build first, for example:

    cd crates/python && maturin develop --release
"""

import json
import sys
import tempfile

import peakseg


def check_mask():
    a = peakseg.Mask.from_rows([[bool(v) for v in row] for row in [[0, 1, 1], [0, 1, 1], [0, 0, 0]]])
    b = peakseg.Mask(3, 3, [True] * 9)
    assert a.area() == 4
    assert a.bbox() == (0, 1, 1, 2)
    assert abs(a.iou(b) - 4 / 9) < 1e-12
    size, counts = a.to_rle()
    assert size == (3, 3) and sum(counts) == 9
    assert peakseg.Mask.from_rle(size, counts) == a


def check_peaks():
    grid = [[0.0] * 8 for _ in range(8)]
    grid[2][2] = 1.0
    grid[6][5] = 0.5
    peaks = peakseg.stimulate_peaks(grid, 3)
    assert peaks == [(2, 2), (6, 5)], peaks
    assert abs(peakseg.peak_score(grid, peaks) - 0.75) < 1e-12
    loss = peakseg.multilabel_loss([2.0, -1.0], [1, 0])
    assert loss > 0.0
    probs = peakseg.selection_probabilities([0.2, 0.6, 0.2])
    assert [round(p, 6) for p in probs] == [0.2, 0.6, 0.2]


def check_scene_and_metrics():
    scene = peakseg.generate_scene(0)
    h, w = scene["height"], scene["width"]
    assert len(scene["image"]) == h * w * 3
    gts = scene["instances"]
    preds = [(c, 0.9, m) for c, m in gts]
    report = json.loads(peakseg.evaluate([(gts, preds)], num_classes=4))
    assert report["map50"] == 1.0, report["map50"]
    assert report["abo"] == 1.0


def check_pipeline():
    config = """
[scene]
num_train = 12
num_val = 6

[classifier]
epochs = 1

[segmenter]
epochs = 1
"""
    with tempfile.TemporaryDirectory() as out:
        audit = peakseg.run_pipeline(out, config_toml=config)
        training = [n for stage, n in audit if stage in ("train-classifier", "make-pseudo", "train-segmenter")]
        assert training and all(n == 0 for n in training), audit


def main():
    check_mask()
    check_peaks()
    check_scene_and_metrics()
    if "--pipeline" in sys.argv:
        check_pipeline()
    print("ok")


if __name__ == "__main__":
    main()
