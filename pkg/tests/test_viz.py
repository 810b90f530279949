import csv
import json

import numpy as np
import pytest

from depthram import viz
from depthram.ram import EpisodeTrace
from depthram.voxel import read_pgm


def trace(centers, label=0, preds=None, seq="s0", frame=None):
    c = np.asarray(centers)
    T, D = c.shape
    preds = np.zeros(T, dtype=int) if preds is None else np.asarray(preds)
    z = np.zeros((T, D))
    return EpisodeTrace(label, z, c, z, z, np.zeros(T), np.full((T, 2), 0.5), preds,
                        float(preds[-1] == label), seq, frame)


def test_heatmap_conserves_visits():
    rng = np.random.default_rng(0)
    traces = [trace(np.column_stack([rng.integers(0, 30, 8), rng.integers(0, 20, 8), np.zeros(8), rng.integers(0, 5, 8)]))
              for _ in range(10)]
    for sigma in (0.0, 1.0, 2.0, 5.0):
        assert viz.visit_heatmap(traces, (30, 20), sigma).sum() == pytest.approx(80.0)


def test_heatmap_unsmoothed_counts():
    h = viz.visit_heatmap([trace([[1, 2, 0, 0], [1, 2, 0, 1], [3, 0, 0, 0]])], (5, 4), sigma=0.0)
    assert h[1, 2] == 2 and h[3, 0] == 1 and h.sum() == 3


def test_rescale():
    assert viz.rescale_u16(np.array([[0.0, 0.5, 1.0]])).tolist() == [[0, 32768, 65535]]
    assert not viz.rescale_u16(np.ones((2, 2))).any()


def test_tau_jumps():
    rows = viz.tau_rows([trace([[0, 0, 0, 3], [0, 0, 0, 5], [0, 0, 0, 1], [0, 0, 0, 1]])])
    assert [r["jump"] for r in rows] == ["none", "forward", "backward", "none"]
    assert [r["delta"] for r in rows] == [0, 2, -4, 0]
    flat = viz.tau_rows([trace([[0, 0, 0], [1, 1, 1]], frame=7)])
    assert [r["tau"] for r in flat] == [7, 7]


def test_single_step_path_has_no_jumps(tmp_path):
    s = viz.write_outputs([trace([[4, 4, 0, 2]], preds=[0])], (10, 10), tmp_path)
    rec = json.loads((tmp_path / "paths" / "s0.json").read_text())
    assert len(rec["steps"]) == 1 and rec["steps"][0]["correct"] is True
    assert s["backward_jumps"] == 0 and s["note"] == "no backward time jumps occurred"


def test_outputs_parse(tmp_path):
    traces = [trace([[2, 3, 0, 4], [5, 1, 0, 0]], label=1, preds=[0, 1], seq="a"),
              trace([[0, 0, 0], [1, 1, 1]], seq="b", frame=3)]
    s = viz.write_outputs(traces, (8, 6), tmp_path)
    heat = read_pgm(tmp_path / "heatmap.pgm")
    # rows along y
    assert heat.shape == (6, 8) and heat.max() == 65535
    with open(tmp_path / "tau_trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and rows[1]["jump"] == "backward"
    assert s["backward_jumps"] == 1 and s["episodes"] == 2
    assert json.loads((tmp_path / "summary.json").read_text()) == s
    assert (tmp_path / "paths" / "b_f003.json").exists()
    steps = json.loads((tmp_path / "paths" / "a.json").read_text())["steps"]
    assert [st["correct"] for st in steps] == [False, True] and steps[0]["cell"] == [2, 3, 0, 4]
