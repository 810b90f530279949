"""Attention visualization data: glimpse paths, visit heatmaps and time traces."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .ram import EpisodeTrace
from .voxel import write_pgm


def path_record(trace: EpisodeTrace) -> dict:
    """One episode's glimpse path in normalized and grid coordinates."""
    steps = []
    for t in range(len(trace.glimpse_locs)):
        steps.append({
            "step": t + 1,
            "location": [float(v) for v in trace.glimpse_locs[t]],
            "cell": [int(v) for v in trace.centers[t]],
            "prediction": int(trace.preds[t]),
            "correct": bool(trace.preds[t] == trace.label),
        })
    return {
        "sequence_id": trace.sequence_id,
        "frame": trace.frame,
        "label": int(trace.label),
        "reward": float(trace.reward),
        "steps": steps,
    }


def visit_heatmap(traces: list[EpisodeTrace], shape: tuple[int, int], sigma: float = 2.0) -> np.ndarray:
    """x-y visit counts of every glimpse centre, Gaussian-smoothed.

    Each visit is spread with the kernel truncated at the border and
    renormalized, so the map's total equals the number of glimpses.
    """
    counts = np.zeros(shape)
    for tr in traces:
        for c in tr.centers:
            counts[int(c[0]), int(c[1])] += 1.0
    if sigma <= 0:
        return counts
    # symmetric kernel: smoothing a ones-map gives each cell's retained mass
    norm = gaussian_filter(np.ones(shape), sigma, mode="constant")
    return gaussian_filter(counts / norm, sigma, mode="constant")


def rescale_u16(heat: np.ndarray) -> np.ndarray:
    """Linear min-max rescale to 0..65535 (all zeros for a flat map)."""
    lo, hi = float(heat.min()), float(heat.max())
    if hi <= lo:
        return np.zeros(heat.shape, dtype=np.uint16)
    return np.round((heat - lo) / (hi - lo) * 65535.0).astype(np.uint16)


def tau_rows(traces: list[EpisodeTrace]) -> list[dict]:
    """Per-step frame index of each episode's glimpses with the jump direction.

    The time axis is the last grid axis for 4D agents; 3D/2D agents observe a
    single frame, so their trace is flat.
    """
    rows = []
    for e, tr in enumerate(traces):
        prev = None
        for t, c in enumerate(tr.centers):
            tau = int(c[3]) if len(c) == 4 else int(tr.frame or 0)
            delta = 0 if prev is None else tau - prev
            jump = "backward" if delta < 0 else "forward" if delta > 0 else "none"
            rows.append({"episode": e, "sequence_id": tr.sequence_id, "step": t + 1, "tau": tau, "delta": delta, "jump": jump})
            prev = tau
    return rows


def write_outputs(traces: list[EpisodeTrace], shape_xy: tuple[int, int], out_dir: str | os.PathLike, sigma: float = 2.0) -> dict:
    """Write paths/*.json, heatmap.pgm, tau_trace.csv and summary.json; returns the summary."""
    out = Path(out_dir)
    (out / "paths").mkdir(parents=True, exist_ok=True)
    for tr in traces:
        name = tr.sequence_id if tr.frame is None else f"{tr.sequence_id}_f{tr.frame:03d}"
        (out / "paths" / f"{name}.json").write_text(json.dumps(path_record(tr), indent=2) + "\n")
    heat = visit_heatmap(traces, shape_xy, sigma)
    # image rows run along y, columns along x
    write_pgm(out / "heatmap.pgm", rescale_u16(heat).T)
    rows = tau_rows(traces)
    with open(out / "tau_trace.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["episode", "sequence_id", "step", "tau", "delta", "jump"])
        w.writeheader()
        w.writerows(rows)
    back = sum(r["jump"] == "backward" for r in rows)
    summary = {
        "episodes": len(traces),
        "glimpses": sum(len(tr.centers) for tr in traces),
        "heatmap_total": float(heat.sum()),
        "heatmap_sigma": sigma,
        "forward_jumps": sum(r["jump"] == "forward" for r in rows),
        "backward_jumps": back,
        "note": "backward time jumps occurred" if back else "no backward time jumps occurred",
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
