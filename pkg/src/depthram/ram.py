"""Recurrent attention agent: glimpse -> encoder -> LSTM -> (location, class) heads."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc
from . import numcore as nc
from .glimpse import GlimpseConfig, SparseGrid, denormalize, extract

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class RamConfig:
    n_classes: int
    dims: int = 4
    hidden: int = 256
    sigma: float = 0.15
    steps: int = 8
    glimpse: GlimpseConfig = GlimpseConfig()
    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    stride: int = 2
    code: int = 128
    dropout: float = 0.5
    random_start: bool = False
    per_step_loss: bool = False
    fine_tune_encoder: bool = False
    # frozen-encoder arithmetic: "single" is about twice as fast, "double" is exact
    encoder_precision: str = "single"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.steps < 1:
            raise ValueError("need at least one glimpse step")
        if self.sigma <= 0:
            raise ValueError("policy sigma must be positive")
        if self.dims not in (2, 3, 4):
            raise ValueError(f"dims must be 2, 3 or 4, got {self.dims}")
        if self.encoder_precision not in ("single", "double"):
            raise ValueError(f"encoder_precision must be single or double, got {self.encoder_precision!r}")

    @property
    def encoder(self) -> enc.EncoderConfig:
        return enc.EncoderConfig(
            ndim=self.dims,
            glimpse_size=self.glimpse.size,
            patches=self.glimpse.patches,
            channels=tuple(self.channels),
            kernel=self.kernel,
            stride=self.stride,
            code=self.code,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RamConfig":
        d = dict(d)
        d["glimpse"] = GlimpseConfig(**d["glimpse"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def init_params(cfg: RamConfig, rng: np.random.Generator, encoder_params: nc.Params | None = None) -> nc.Params:
    params = dict(encoder_params) if encoder_params is not None else enc.init_params(cfg.encoder, rng)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    params.update(nc.lstm_init(rng, cfg.code, cfg.hidden))
    params["loc.W"] = nc.uniform_init(rng, (cfg.dims, cfg.hidden), cfg.hidden)
    params["loc.b"] = np.zeros(cfg.dims)
    params["act.W"] = nc.uniform_init(rng, (cfg.n_classes, cfg.hidden), cfg.hidden)
    params["act.b"] = np.zeros(cfg.n_classes)
    return params


# ---------------------------------------------------------------- heads


def location_head(h: np.ndarray, params: nc.Params) -> np.ndarray:
    """Mean of the location policy, strictly inside (-1, 1) per axis."""
    h = np.atleast_2d(h)
    return np.tanh(nc.linear(h, params["loc.W"], params["loc.b"]))


def gaussian_log_density(phi: np.ndarray, mu: np.ndarray, sigma: float) -> np.ndarray:
    """log N(phi; mu, sigma^2 I), summed over the last axis."""
    z = (phi - mu) / sigma
    d = phi.shape[-1]
    return -0.5 * np.sum(z * z, axis=-1) - d * (np.log(sigma) + 0.5 * LOG_2PI)


def sample_location(mu: np.ndarray, sigma: float, rng: np.random.Generator):
    """Draw phi ~ N(mu, sigma^2 I). Returns (phi, log-density at the unclamped phi)."""
    mu = np.asarray(mu, dtype=np.float64)
    phi = mu + sigma * rng.standard_normal(mu.shape)
    return phi, gaussian_log_density(phi, mu, sigma)


def action_head(h: np.ndarray, params: nc.Params) -> tuple[np.ndarray, np.ndarray]:
    """Class distribution and argmax prediction (ties go to the lowest index)."""
    h = np.atleast_2d(h)
    probs = nc.softmax(nc.linear(h, params["act.W"], params["act.b"]))
    return probs, np.argmax(probs, axis=-1)


# ---------------------------------------------------------------- rollout


@dataclass
class EpisodeTrace:
    """One episode. Step ``t`` looked at ``glimpse_locs[t]`` and then emitted
    ``mu[t]``, ``phi[t]`` (next location) and ``probs[t]``."""

    label: int
    glimpse_locs: np.ndarray  # (T, D) normalized, clamped
    centers: np.ndarray  # (T, D) grid cells actually extracted
    mu: np.ndarray  # (T, D)
    phi: np.ndarray  # (T, D) before clamping
    log_density: np.ndarray  # (T,)
    probs: np.ndarray  # (T, C)
    preds: np.ndarray  # (T,)
    reward: float
    sequence_id: str = ""
    frame: int | None = None

    @property
    def steps(self) -> int:
        return len(self.preds)

    def to_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "frame": self.frame,
            "label": int(self.label),
            "reward": float(self.reward),
            "steps": [
                {
                    "t": t + 1,
                    "glimpse_normalized": self.glimpse_locs[t].tolist(),
                    "glimpse_grid": self.centers[t].tolist(),
                    "mu": self.mu[t].tolist(),
                    "phi": self.phi[t].tolist(),
                    "log_density": float(self.log_density[t]),
                    "pred": int(self.preds[t]),
                    "correct": bool(self.preds[t] == self.label),
                    "p_true": float(self.probs[t, self.label]),
                }
                for t in range(self.steps)
            ],
        }


def write_traces(path: str | os.PathLike, traces: list[EpisodeTrace]) -> None:
    """JSON lines, one episode per line."""
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_dict()) + "\n")


@dataclass
class Rollout:
    traces: list[EpisodeTrace]
    labels: np.ndarray
    # per-step caches for backpropagation
    codes: list = field(default_factory=list)
    code_masks: list = field(default_factory=list)
    enc_caches: list = field(default_factory=list)
    lstm_caches: list = field(default_factory=list)
    hs: list = field(default_factory=list)
    hds: list = field(default_factory=list)
    h_masks: list = field(default_factory=list)
    mus: list = field(default_factory=list)
    phis: list = field(default_factory=list)
    probs: list = field(default_factory=list)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("G4D_THREADS", "1")))
    except ValueError:
        return 1


def _extract_all(grids: list[SparseGrid], locs: np.ndarray, gcfg: GlimpseConfig) -> np.ndarray:
    n = _threads()
    if n > 1 and len(grids) > 1:
        with ThreadPoolExecutor(n) as pool:
            return np.stack(list(pool.map(lambda a: extract(a[0], a[1], gcfg), zip(grids, locs))))
    return np.stack([extract(g, l, gcfg) for g, l in zip(grids, locs)])


def run_episodes(
    grids: list[SparseGrid],
    labels: np.ndarray,
    params: nc.Params,
    cfg: RamConfig,
    rng: np.random.Generator | None = None,
    train: bool = False,
    keep_cache: bool = False,
    init_locs: np.ndarray | None = None,
) -> Rollout:
    """Run one batched episode per grid.

    In train mode locations are sampled from the Gaussian policy and dropout
    is active; in eval mode the agent moves to the policy mean and is fully
    deterministic.
    """
    E, D, T = len(grids), cfg.dims, cfg.steps
    labels = np.asarray(labels, dtype=np.int64)
    if train and rng is None:
        raise ValueError("train-mode rollouts need an rng")
    if any(g.ndim != D for g in grids):
        raise ValueError(f"grids must have {D} axes for a {D}D agent")
    ecfg = cfg.encoder
    need_enc_grad = keep_cache and cfg.fine_tune_encoder
    single = cfg.encoder_precision == "single" and not cfg.fine_tune_encoder
    if single:
        eparams = {k: v.astype(np.float32) for k, v in params.items() if k.startswith("enc.")}
    else:
        eparams = params
    if init_locs is not None:
        loc = np.asarray(init_locs, dtype=np.float64).reshape(E, D)
    elif train and cfg.random_start:
        loc = rng.uniform(-0.5, 0.5, size=(E, D))
    else:
        loc = np.zeros((E, D))
    h = np.zeros((E, cfg.hidden))
    c = np.zeros((E, cfg.hidden))
    W, b = params["lstm.W"], params["lstm.b"]
    out = Rollout(traces=[], labels=labels)
    glocs, centers, mus, phis, logd, probs_all = [], [], [], [], [], []
    for _ in range(T):
        glocs.append(loc.copy())
        centers.append(np.stack([denormalize(l, g.shape) for l, g in zip(loc, grids)]))
        glimpses = _extract_all(grids, loc, cfg.glimpse)
        ecache = None
        if need_enc_grad:
            code, ecache = enc.encode(glimpses, eparams, ecfg, keep_cache=True)
        elif single:
            code = enc.encode(glimpses.astype(np.float32), eparams, ecfg).astype(np.float64)
        else:
            code = enc.encode(glimpses, eparams, ecfg)
        code = enc.standardize(code, params)
        code_d, cmask = nc.dropout(code, cfg.dropout, train, rng)
        h, c, lcache = nc.lstm_step(W, b, code_d, h, c)
        mu = location_head(h, params)
        if train:
            phi, ld = sample_location(mu, cfg.sigma, rng)
        else:
            phi, ld = mu.copy(), gaussian_log_density(mu, mu, cfg.sigma)
        hd, hmask = nc.dropout(h, cfg.dropout, train, rng)
        probs, _ = action_head(hd, params)
        mus.append(mu)
        phis.append(phi)
        logd.append(ld)
        probs_all.append(probs)
        if keep_cache:
            out.codes.append(code)
            out.code_masks.append(cmask)
            out.enc_caches.append(ecache)
            out.lstm_caches.append(lcache)
            out.hs.append(h)
            out.hds.append(hd)
            out.h_masks.append(hmask)
            out.mus.append(mu)
            out.phis.append(phi)
            out.probs.append(probs)
        loc = np.clip(phi, -1.0, 1.0)
    glocs_a = np.stack(glocs, axis=1)
    centers_a = np.stack(centers, axis=1)
    mus_a, phis_a = np.stack(mus, axis=1), np.stack(phis, axis=1)
    logd_a, probs_a = np.stack(logd, axis=1), np.stack(probs_all, axis=1)
    preds_a = np.argmax(probs_a, axis=-1)
    for e in range(E):
        out.traces.append(
            EpisodeTrace(
                label=int(labels[e]),
                glimpse_locs=glocs_a[e],
                centers=centers_a[e],
                mu=mus_a[e],
                phi=phis_a[e],
                log_density=logd_a[e],
                probs=probs_a[e],
                preds=preds_a[e],
                reward=float(preds_a[e, -1] == labels[e]),
            )
        )
    return out


def rollout(
    grid: SparseGrid,
    label: int,
    params: nc.Params,
    cfg: RamConfig,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
) -> EpisodeTrace:
    """Single-episode convenience wrapper around ``run_episodes``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    return run_episodes([grid], np.array([label]), params, cfg, rng, train=mode == "train").traces[0]


def backward(
    roll: Rollout,
    params: nc.Params,
    cfg: RamConfig,
    ce_weights: np.ndarray,
    dmu: list[np.ndarray] | None = None,
) -> nc.Params:
    """Backpropagation through time for one batched rollout.

    ``ce_weights[e]`` scales episode e's cross-entropy (at the last step, or
    every step with ``per_step_loss``). ``dmu[t]`` is the loss gradient with
    respect to the location means at step t (the REINFORCE term); it flows
    through the location head into the LSTM.
    """
    T = len(roll.lstm_caches)
    E = len(roll.labels)
    ce_weights = np.asarray(ce_weights, dtype=np.float64).reshape(E, 1)
    grads = {k: np.zeros_like(params[k]) for k in ("lstm.W", "lstm.b", "loc.W", "loc.b", "act.W", "act.b")}
    dh_next = np.zeros((E, cfg.hidden))
    dc_next = np.zeros((E, cfg.hidden))
    rows = np.arange(E)
    for t in range(T - 1, -1, -1):
        h, hd = roll.hs[t], roll.hds[t]
        dh = dh_next
        if t == T - 1 or cfg.per_step_loss:
            dlogits = roll.probs[t].copy()
            dlogits[rows, roll.labels] -= 1.0
            dlogits *= ce_weights
            dhd, dW, db = nc.linear_backward(dlogits, hd, params["act.W"])
            grads["act.W"] += dW
            grads["act.b"] += db
            if roll.h_masks[t] is not None:
                dhd = dhd * roll.h_masks[t]
            dh = dh + dhd
        if dmu is not None:
            mu = roll.mus[t]
            dpre = nc.tanh_backward(dmu[t], mu)
            dhl, dW, db = nc.linear_backward(dpre, h, params["loc.W"])
            grads["loc.W"] += dW
            grads["loc.b"] += db
            dh = dh + dhl
        dx, dh_next, dc_next, dW, db = nc.lstm_step_backward(params["lstm.W"], dh, dc_next, roll.lstm_caches[t])
        grads["lstm.W"] += dW
        grads["lstm.b"] += db
        if cfg.fine_tune_encoder and roll.enc_caches[t] is not None:
            if roll.code_masks[t] is not None:
                dx = dx * roll.code_masks[t]
            if "enc.norm.std" in params:
                dx = dx / params["enc.norm.std"]
            egrads, _ = enc.encode_backward(dx, params, cfg.encoder, roll.enc_caches[t])
            for k, v in egrads.items():
                grads[k] = grads.get(k, 0.0) + v
    return grads
