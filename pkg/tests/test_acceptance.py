"""Acceptance criteria. Each test records one PASS/FAIL line, shown in the terminal summary.

The desk-scale criteria (5, 6, 9) share one synthetic dataset and encoder set,
built through the command-line interface from the JSON files in ``configs/``.
"""

import csv
import filecmp
import json
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from depthram import metrics, synth, trainer
from depthram import numcore as nc
from depthram.cli import main
from depthram.glimpse import GlimpseConfig, extract, extract_dense
from depthram.voxel import load_dataset

from bandit import analytic_grad, episode_terms, summarize
from gradcases import CASES
from test_glimpse import random_grid

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def report(record_property, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    record_property("acceptance", line)
    assert ok, line


# ---------------------------------------------------------------- 1


def test_criterion_1_random_baseline(record_property):
    published = {50: (2.0, 51.0), 11: (9.1, 54.5), 79: (1.3, 50.6), 12: (8.3, 54.2)}
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    parts, ok = [], True
    for C, (top1, nauc) in published.items():
        analytic = (100.0 / C, (C + 1) / (2 * C) * 100.0)
        mc = metrics.random_baseline(C, 10_000, rng)
        ok &= abs(analytic[0] - top1) <= 0.05 and abs(analytic[1] - nauc) <= 0.05
        ok &= abs(mc.top1 - top1) <= 0.5 and abs(mc.nauc - nauc) <= 0.5
        parts.append(f"C={C} mc=({mc.top1:.1f},{mc.nauc:.1f}) table=({top1},{nauc})")
    dt = time.perf_counter() - t0
    report(record_property, 1, ok and dt < 10, "; ".join(parts) + f"; {dt:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_glimpse_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(1000):
        nd = int(rng.integers(1, 5))
        grid, dense = random_grid(rng, nd, max_side=32)
        cfg = GlimpseConfig(int(rng.choice([2, 4, 6, 8])), int(rng.integers(1, 6)))
        # half the locations sit on or beyond the boundary
        loc = rng.uniform(-1, 1, nd) if rng.random() < 0.5 else rng.choice([-1.0, 1.0], nd) * rng.uniform(0.9, 1.0, nd)
        mismatches += not np.array_equal(extract(grid, loc, cfg), extract_dense(dense, loc, cfg))
    dt = time.perf_counter() - t0
    report(record_property, 2, mismatches == 0 and dt < 60, f"{mismatches}/1000 mismatches; {dt:.1f}s")


# ---------------------------------------------------------------- 3


def test_criterion_3_gradient_suite(record_property):
    t0 = time.perf_counter()
    worst = {}
    for name, case in sorted(CASES.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        # large 4D kernels are probed on 48 random entries per array
        worst[name] = max(nc.grad_check(*case(rng), max_entries=48, rng=rng) for _ in range(20))
    dt = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = all(v < 1e-4 for v in worst.values()) and dt < 120
    report(record_property, 3, ok, f"{len(worst)} operators x 20 configs, worst {top} {worst[top]:.1e}; {dt:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_reinforce_unbiased(record_property):
    t0 = time.perf_counter()
    truth = analytic_grad()
    m0, s0, v0 = summarize(episode_terms(10_000, "none", np.random.default_rng(40)))
    m1, s1, v1 = summarize(episode_terms(10_000, "ema", np.random.default_rng(41)))
    z0 = np.max(np.abs(m0 - truth) / s0)
    z1 = np.max(np.abs(m1 - truth) / s1)
    dt = time.perf_counter() - t0
    ok = z0 <= 3 and z1 <= 3 and np.all(v1 <= v0) and dt < 60
    report(record_property, 4, ok,
           f"max |z| no-baseline {z0:.2f}, ema {z1:.2f}; variance {v1.sum():.3f} <= {v0.sum():.3f}; {dt:.1f}s")


# ---------------------------------------------------------------- 7


def test_criterion_7_metric_properties(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(1000):
        n, C = int(rng.integers(1, 40)), int(rng.integers(2, 30))
        scores = rng.normal(size=(n, C))
        if rng.random() < 0.3:
            scores = np.round(scores, 1)
        labels = rng.integers(0, C, size=n)
        r = metrics.cmc(scores, labels)
        shifted = metrics.cmc(scores + rng.normal(scale=5.0, size=(n, 1)), labels)
        bad += not (np.all(np.diff(r.cmc) >= 0) and r.cmc[-1] == 100.0 and shifted.nauc == r.nauc)
    dt = time.perf_counter() - t0
    report(record_property, 7, bad == 0 and dt < 10, f"{bad}/1000 score matrices violate a property; {dt:.1f}s")


# ---------------------------------------------------------------- 8


def test_criterion_8_determinism(record_property, tmp_path):
    from conftest import tiny_synth_config

    cfg = tiny_synth_config()
    synth.emit_dataset(cfg, tmp_path / "a")
    synth.emit_dataset(cfg, tmp_path / "b")
    files = [str(p.relative_to(tmp_path / "a")) for p in (tmp_path / "a").rglob("*") if p.is_file()]
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    synth_ok = not mismatch and not errors

    train, labels = load_dataset(tmp_path / "a", "train")
    test, _ = load_dataset(tmp_path / "a", "test", labels=labels)
    tcfg = trainer.TrainConfig(epochs=2, dims=4, hidden=16, steps=3, glimpse_size=4, glimpse_patches=2,
                               batch_size=1, lr=0.05, seed=5)
    runs = []
    for name in ("r1", "r2"):
        params, _ = trainer.fit(train, None, tcfg, len(labels), out_dir=tmp_path / name)
        runs.append(params)
    same_params = all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])
    same_bytes = (tmp_path / "r1" / "final.g4d").read_bytes() == (tmp_path / "r2" / "final.g4d").read_bytes()
    loaded, rcfg, _ = trainer.load_model(tmp_path / "r1" / "final.g4d")
    again, _, _ = trainer.load_model(tmp_path / "r2" / "final.g4d")
    p_mem = trainer.predict(test, runs[0], rcfg)[0]
    p_a = trainer.predict(test, loaded, rcfg)[0]
    p_b = trainer.predict(test, again, rcfg)[0]
    reload_ok = np.array_equal(p_a, p_b) and np.array_equal(p_mem.argmax(1), p_a.argmax(1)) and np.allclose(p_mem, p_a, atol=1e-5)
    ok = synth_ok and same_params and same_bytes and reload_ok
    report(record_property, 8, ok,
           f"synth byte-identical {synth_ok}; train repeat identical {same_params and same_bytes}; "
           f"reloaded predictions identical {reload_ok} (max prob diff vs in-memory {np.abs(p_mem - p_a).max():.1e})")


# ---------------------------------------------------------------- desk-scale pipeline


class Desk:
    """Lazily built synthetic benchmark, encoders and trained agents."""

    def __init__(self, root: Path):
        self.root = root
        self.data = root / "data"
        self.runs: dict[tuple[int, int], dict] = {}
        t0 = time.perf_counter()
        assert main(["synth", "--config", str(CONFIGS / "desk_synth.json"), "--out", str(self.data)]) == 0
        self.synth_seconds = time.perf_counter() - t0
        self.encoder_seconds: dict[int, float] = {}

    def encoder(self, dims: int) -> Path:
        path = self.root / f"enc{dims}.g4d"
        if not path.exists():
            t0 = time.perf_counter()
            assert main(["pretrain-encoder", "--data", str(self.data), "--dims", str(dims), "--out", str(path)]) == 0
            self.encoder_seconds[dims] = time.perf_counter() - t0
        return path

    def run(self, dims: int, seed: int) -> dict:
        key = (dims, seed)
        if key not in self.runs:
            enc_path = self.encoder(dims)
            out = self.root / f"run{dims}_{seed}"
            t0 = time.perf_counter()
            assert main(["train", "--config", str(CONFIGS / "desk_train.json"), "--data", str(self.data),
                         "--encoder", str(enc_path), "--dims", str(dims), "--seed", str(seed), "--out", str(out)]) == 0
            train_s = time.perf_counter() - t0
            # score the final weights; no checkpoint is chosen by looking at the test split
            assert main(["eval", "--ckpt", str(out / "final.g4d"), "--data", str(self.data), "--mode", "multi",
                         "--scheme", "mean-logprob", "--out", str(out / "report.json")]) == 0
            self.runs[key] = {"report": json.loads((out / "report.json").read_text()), "dir": out,
                              "train_seconds": train_s}
        return self.runs[key]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return Desk(tmp_path_factory.mktemp("desk"))


def test_criterion_5_desk_identification(record_property, desk):
    t0 = time.perf_counter()
    run = desk.run(4, 0)
    rep = run["report"]
    train, labels = load_dataset(desk.data, "train")
    test, _ = load_dataset(desk.data, "test", labels=labels)
    gei, _ = metrics.gei_baseline(train, test, len(labels))
    dt = time.perf_counter() - t0 + desk.synth_seconds
    ok = rep["top1"] >= 70.0 and rep["nauc"] >= 85.0 and rep["top1"] > gei.top1 and dt < 1800
    report(record_property, 5, ok,
           f"4D RAM top-1 {rep['top1']:.1f}% nAUC {rep['nauc']:.1f} (need >= 70 / >= 85); GEI top-1 {gei.top1:.1f}% "
           f"nAUC {gei.nauc:.1f}; random 16.7/58.3; {dt / 60:.1f} min")


def test_criterion_6_dimensional_ordering(record_property, desk):
    means = {}
    for dims in (4, 3, 2):
        means[dims] = float(np.mean([desk.run(dims, s)["report"]["top1"] for s in (0, 1, 2)]))
    ok = means[4] >= means[3] >= means[2] - 5.0
    per_seed = {d: [round(desk.run(d, s)["report"]["top1"], 1) for s in (0, 1, 2)] for d in (4, 3, 2)}
    report(record_property, 6, ok,
           f"mean top-1 over seeds 0-2: 4D {means[4]:.1f} 3D {means[3]:.1f} 2D {means[2]:.1f} "
           f"(need 4D >= 3D >= 2D - 5); per seed {per_seed}")


def test_criterion_9_visualization(record_property, desk):
    run = desk.run(4, 0)
    out = desk.root / "viz"
    assert main(["visualize", "--ckpt", str(run["dir"] / "final.g4d"), "--data", str(desk.data), "--out", str(out)]) == 0
    paths = [json.loads(p.read_text()) for p in sorted((out / "paths").glob("*.json"))]
    with open(out / "tau_trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    from depthram.voxel import read_pgm

    heat = read_pgm(out / "heatmap.pgm")
    summary = json.loads((out / "summary.json").read_text())
    back = sum(r["jump"] == "backward" for r in rows)
    parsed = len(paths) == 12 and heat.shape == (100, 250) and len(rows) == 12 * 8
    stated = back > 0 or summary["note"] == "no backward time jumps occurred"
    report(record_property, 9, parsed and stated and summary["backward_jumps"] == back,
           f"{len(paths)} path files, heatmap {heat.shape[1]}x{heat.shape[0]}, {len(rows)} trace rows; "
           f"{back} backward time jumps ({summary['note']})")


def test_training_reward_trend(desk):
    """Mean train reward, smoothed over 5 epochs, does not drop over the run."""
    with open(desk.run(4, 0)["dir"] / "train_log.csv") as fh:
        reward = np.array([float(r["mean_reward"]) for r in csv.DictReader(fh)])
    ma = np.convolve(reward, np.ones(5) / 5, mode="valid")
    print(f"5-epoch moving-average reward: first {ma[0]:.3f} last {ma[-1]:.3f}, largest drop {-np.diff(ma).min():.3f}")
    assert np.all(np.diff(ma) >= 0)
