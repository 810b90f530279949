"""Identification metrics (top-k, CMC, nAUC) and non-learned baselines."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .voxel import LabeledSequence


@dataclass
class EvalReport:
    top1: float
    cmc: np.ndarray  # percent, ranks 1..C
    nauc: float
    per_class: dict[int, float] = field(default_factory=dict)
    n: int = 0

    def top(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "cmc": [float(v) for v in self.cmc],
            "nauc": self.nauc,
            "per_class_accuracy": {str(k): v for k, v in sorted(self.per_class.items())},
            "n": self.n,
        }

    def write(self, json_path: str | os.PathLike, csv_path: str | os.PathLike | None = None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["rank", "cmc_percent"])
                for k, v in enumerate(self.cmc, 1):
                    w.writerow([k, f"{v:.6f}"])


def ranks(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """1-based rank of each row's true class; equal scores favour the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(labels))
    true = scores[rows, labels][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    better = (scores > true) | ((scores == true) & (cols < labels[:, None]))
    return better.sum(axis=1) + 1


def cmc(scores: np.ndarray, labels: np.ndarray) -> EvalReport:
    """CMC over ranks 1..C, top-1 and nAUC (the mean of the CMC over all ranks)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("score matrix is empty")
    if scores.shape[1] < 2:
        raise ValueError("need at least two classes")
    if len(labels) != scores.shape[0]:
        raise ValueError("one label per score row required")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    C = scores.shape[1]
    r = ranks(scores, labels)
    counts = np.bincount(r, minlength=C + 1)[1:]
    curve = np.cumsum(counts) / len(labels) * 100.0
    per_class = {int(c): float(np.mean(r[labels == c] == 1) * 100.0) for c in np.unique(labels)}
    return EvalReport(float(curve[0]), curve, float(curve.mean()), per_class, len(labels))


def multishot(frame_probs: np.ndarray, scheme: str = "vote") -> int:
    """Sequence-level class from per-frame class distributions (ties -> lowest index)."""
    p = np.atleast_2d(np.asarray(frame_probs, dtype=np.float64))
    if p.shape[0] < 1:
        raise ValueError("need at least one frame")
    return int(np.argmax(multishot_scores(p, scheme)))


def multishot_scores(frame_probs: np.ndarray, scheme: str = "vote") -> np.ndarray:
    """Per-class sequence scores: vote counts or mean log-probabilities."""
    p = np.atleast_2d(np.asarray(frame_probs, dtype=np.float64))
    if scheme == "vote":
        return np.bincount(np.argmax(p, axis=1), minlength=p.shape[1]).astype(np.float64)
    if scheme == "mean-logprob":
        return np.mean(np.log(np.maximum(p, 1e-300)), axis=0)
    raise ValueError(f"unknown multi-shot scheme {scheme!r}")


def aggregate(probs: np.ndarray, labels: np.ndarray, groups: list[str], scheme: str = "vote") -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Collapse per-frame rows into one score row per group (sequence)."""
    order: dict[str, list[int]] = {}
    for i, g in enumerate(groups):
        order.setdefault(g, []).append(i)
    rows, labs = [], []
    for g, idx in order.items():
        rows.append(multishot_scores(probs[idx], scheme))
        labs.append(labels[idx[0]])
    return np.array(rows), np.array(labs, dtype=np.int64), list(order)


def random_scores(n: int, C: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random((n, C))


def random_baseline(C: int, trials: int, rng: np.random.Generator) -> EvalReport:
    """Uniform-random guessing; expected top-1 = 100/C and nAUC = 100 (C + 1) / (2C)."""
    labels = rng.integers(0, C, size=trials)
    return cmc(random_scores(trials, C, rng), labels)


# ---------------------------------------------------------------- gait energy image


def silhouettes(seq: LabeledSequence) -> np.ndarray:
    """Per-frame binary x-y silhouettes (occupancy projected along z), shape (f, X, Y)."""
    X, Y = seq.tensor.dims[:2]
    out = np.zeros((seq.tensor.frames, X, Y))
    c = seq.tensor.coords
    out[c[:, 3], c[:, 0], c[:, 1]] = 1.0
    return out


def gait_energy_image(seq: LabeledSequence) -> np.ndarray:
    return silhouettes(seq).mean(axis=0)


def gei_baseline(train: list[LabeledSequence], test: list[LabeledSequence], n_classes: int | None = None) -> tuple[EvalReport, np.ndarray]:
    """1-nearest-neighbour gait-energy-image matching.

    A test sequence's score for class c is minus the Euclidean distance to the
    closest training GEI of class c. Returns (report, score matrix).
    """
    if not train or not test:
        raise ValueError("GEI baseline needs non-empty train and test sets")
    C = n_classes or (max(s.label for s in train + test) + 1)
    gallery = np.stack([gait_energy_image(s).ravel() for s in train])
    glabels = np.array([s.label for s in train])
    probes = np.stack([gait_energy_image(s).ravel() for s in test])
    dist = np.stack([np.sqrt(((gallery - p) ** 2).sum(axis=1)) for p in probes])
    scores = np.full((len(test), C), -np.inf)
    for c in range(C):
        m = glabels == c
        if m.any():
            scores[:, c] = -dist[:, m].min(axis=1)
    # classes without gallery entries rank last
    finite_min = scores[np.isfinite(scores)].min()
    scores[~np.isfinite(scores)] = finite_min - 1.0
    return cmc(scores, np.array([s.label for s in test])), scores

