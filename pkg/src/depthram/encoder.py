"""Convolutional glimpse autoencoder.

Each of the G patches runs through the same two strided convolutions; the
per-patch features are concatenated and squeezed by a linear layer into the
code fed to the recurrent core. The decoder mirrors the encoder and is only
used for offline pretraining.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numcore as nc
from .glimpse import GlimpseConfig, SparseGrid, extract

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    ndim: int = 4
    glimpse_size: int = 8
    patches: int = 5
    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    stride: int = 2
    code: int = 128

    @property
    def pad(self) -> int:
        return self.kernel // 2

    def spatial_sizes(self) -> list[int]:
        """Patch side before each conv and after the last one."""
        sizes = [self.glimpse_size]
        for _ in self.channels:
            sizes.append(nc.conv_output_size(sizes[-1], self.kernel, self.stride, self.pad))
        return sizes

    @property
    def feature_size(self) -> int:
        return self.patches * self.channels[-1] * self.spatial_sizes()[-1] ** self.ndim

    @property
    def input_size(self) -> int:
        return self.patches * self.glimpse_size ** self.ndim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_glimpse(cls, gcfg: GlimpseConfig, ndim: int, **kw) -> "EncoderConfig":
        return cls(ndim=ndim, glimpse_size=gcfg.size, patches=gcfg.patches, **kw)


@dataclass(frozen=True)
class PretrainConfig:
    """Offline autoencoder training run (JSON field names match)."""

    dims: int = 4
    epochs: int = 10
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    corpus: int = 1200
    near_occupied: float = 0.5
    holdout: float = 0.2
    glimpse_size: int = 8
    glimpse_patches: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.dims not in (2, 3, 4):
            raise ValueError(f"dims must be 2, 3 or 4, got {self.dims}")
        if self.epochs < 0 or self.corpus < 2 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0, corpus >= 2 and batch_size >= 1")

    @property
    def glimpse(self) -> GlimpseConfig:
        return GlimpseConfig(self.glimpse_size, self.glimpse_patches)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig.from_glimpse(self.glimpse, self.dims)

    def optim_state(self) -> nc.OptimState:
        return nc.OptimState(self.lr, self.momentum, self.weight_decay)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown pretraining config fields: {sorted(unknown)}")
        return cls(**d)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> nc.Params:
    p: nc.Params = {}
    kshape = (cfg.kernel,) * cfg.ndim
    cin = 1
    for i, cout in enumerate(cfg.channels, 1):
        fan = cin * cfg.kernel ** cfg.ndim
        p[f"enc.conv{i}.W"] = nc.uniform_init(rng, (cout, cin) + kshape, fan)
        p[f"enc.conv{i}.b"] = np.zeros(cout)
        cin = cout
    p["enc.fc.W"] = nc.uniform_init(rng, (cfg.code, cfg.feature_size), cfg.feature_size)
    p["enc.fc.b"] = np.zeros(cfg.code)
    p["dec.fc.W"] = nc.uniform_init(rng, (cfg.feature_size, cfg.code), cfg.code)
    p["dec.fc.b"] = np.zeros(cfg.feature_size)
    # transposed convs reuse the forward layout (C_small, C_big, *K)
    chans = (1,) + tuple(cfg.channels)
    for i in range(len(cfg.channels), 0, -1):
        c_small, c_big = chans[i], chans[i - 1]
        fan = c_small * cfg.kernel ** cfg.ndim
        p[f"dec.deconv{i}.W"] = nc.uniform_init(rng, (c_small, c_big) + kshape, fan)
        p[f"dec.deconv{i}.b"] = np.zeros(c_big)
    return p


def encoder_names(params: nc.Params) -> list[str]:
    return [k for k in params if k.startswith("enc.")]


def encode(glimpses: np.ndarray, params: nc.Params, cfg: EncoderConfig, keep_cache: bool = False):
    """Codes for a batch of flat glimpses, shape (B, input_size) -> (B, code).

    With ``keep_cache`` returns ``(codes, cache)`` for ``encode_backward``.
    """
    g = np.asarray(glimpses)
    if g.dtype != np.float32:
        g = g.astype(np.float64)
    if g.ndim == 1:
        g = g[None]
    if g.shape[1] != cfg.input_size:
        raise nc.ShapeError(f"glimpse length {g.shape[1]} != expected {cfg.input_size}")
    B = g.shape[0]
    x = g.reshape((B * cfg.patches, 1) + (cfg.glimpse_size,) * cfg.ndim)
    acts = [x]
    for i in range(1, len(cfg.channels) + 1):
        x = np.tanh(nc.conv_nd(x, params[f"enc.conv{i}.W"], params[f"enc.conv{i}.b"], cfg.stride, cfg.pad))
        acts.append(x)
    feat = x.reshape(B, -1)
    code = np.tanh(nc.linear(feat, params["enc.fc.W"], params["enc.fc.b"]))
    if keep_cache:
        return code, (acts, feat, code)
    return code


def encode_backward(dcode: np.ndarray, params: nc.Params, cfg: EncoderConfig, cache, need_input: bool = False):
    """Gradients of the encoder parameters (and optionally the glimpses)."""
    acts, feat, code = cache
    grads: nc.Params = {}
    dz = nc.tanh_backward(dcode, code)
    dfeat, grads["enc.fc.W"], grads["enc.fc.b"] = nc.linear_backward(dz, feat, params["enc.fc.W"])
    dx = dfeat.reshape(acts[-1].shape)
    for i in range(len(cfg.channels), 0, -1):
        dx = nc.tanh_backward(dx, acts[i])
        W = params[f"enc.conv{i}.W"]
        if i == 1 and not need_input:
            grads["enc.conv1.W"] = nc.conv_nd_weight_grad(dx, acts[0], W.shape[2:], cfg.stride, cfg.pad)
            grads["enc.conv1.b"] = dx.sum(axis=(0,) + tuple(range(2, dx.ndim)))
            dx = None
            break
        dx, grads[f"enc.conv{i}.W"], grads[f"enc.conv{i}.b"] = nc.conv_nd_backward(dx, acts[i - 1], W, cfg.stride, cfg.pad)
    dglimpse = dx.reshape(code.shape[0], -1) if dx is not None else None
    return grads, dglimpse


def decode(code: np.ndarray, params: nc.Params, cfg: EncoderConfig, keep_cache: bool = False):
    B = code.shape[0]
    sizes = cfg.spatial_sizes()
    hidden = np.tanh(nc.linear(code, params["dec.fc.W"], params["dec.fc.b"]))
    x = hidden.reshape((B * cfg.patches, cfg.channels[-1]) + (sizes[-1],) * cfg.ndim)
    layers = []
    for i in range(len(cfg.channels), 0, -1):
        out = (sizes[i - 1],) * cfg.ndim
        y = nc.conv_transpose_nd(x, params[f"dec.deconv{i}.W"], params[f"dec.deconv{i}.b"], out, cfg.stride, cfg.pad)
        y = nc.sigmoid(y) if i == 1 else np.tanh(y)
        layers.append((i, x, y))
        x = y
    recon = x.reshape(B, -1)
    if keep_cache:
        return recon, (code, hidden, layers)
    return recon


def decode_backward(drecon: np.ndarray, params: nc.Params, cfg: EncoderConfig, cache):
    code, hidden, layers = cache
    grads: nc.Params = {}
    dx = drecon.reshape(layers[-1][2].shape)
    for i, x_in, y in reversed(layers):
        dy = nc.sigmoid_backward(dx, y) if i == 1 else nc.tanh_backward(dx, y)
        dx, grads[f"dec.deconv{i}.W"], grads[f"dec.deconv{i}.b"] = nc.conv_transpose_nd_backward(
            dy, x_in, params[f"dec.deconv{i}.W"], cfg.stride, cfg.pad
        )
    dfc = nc.tanh_backward(dx.reshape(hidden.shape), hidden)
    dcode, grads["dec.fc.W"], grads["dec.fc.b"] = nc.linear_backward(dfc, code, params["dec.fc.W"])
    return grads, dcode


def reconstruction_loss(glimpses: np.ndarray, params: nc.Params, cfg: EncoderConfig) -> float:
    recon = decode(encode(glimpses, params, cfg), params, cfg)
    return float(np.mean((recon - glimpses) ** 2))


def autoencoder_grads(glimpses: np.ndarray, params: nc.Params, cfg: EncoderConfig):
    """Mean-squared reconstruction loss and gradients for every encoder/decoder parameter."""
    code, ecache = encode(glimpses, params, cfg, keep_cache=True)
    recon, dcache = decode(code, params, cfg, keep_cache=True)
    diff = recon - glimpses
    loss = float(np.mean(diff ** 2))
    drecon = 2.0 * diff / diff.size
    grads, dcode = decode_backward(drecon, params, cfg, dcache)
    egrads, _ = encode_backward(dcode, params, cfg, ecache)
    grads.update(egrads)
    return loss, grads


def sample_corpus(
    grids: list[SparseGrid],
    n: int,
    rng: np.random.Generator,
    gcfg: GlimpseConfig = GlimpseConfig(),
    near_occupied: float = 0.0,
) -> np.ndarray:
    """``n`` glimpses at uniform-random locations drawn from ``grids``.

    A fraction ``near_occupied`` of them is instead centred on a random
    occupied cell, which keeps sparse grids from yielding mostly-empty corpora.
    """
    nd = grids[0].ndim
    out = np.empty((n, gcfg.length(nd)))
    for i in range(n):
        grid = grids[rng.integers(len(grids))]
        if len(grid.coords) and rng.random() < near_occupied:
            cell = grid.coords[rng.integers(len(grid.coords))]
            loc = np.asarray(cell, dtype=np.float64) / np.maximum(np.asarray(grid.shape) - 1, 1) * 2 - 1
        else:
            loc = rng.uniform(-1.0, 1.0, size=nd)
        out[i] = extract(grid, loc, gcfg)
    return out


def pretrain(
    corpus: np.ndarray,
    cfg: EncoderConfig,
    epochs: int,
    opt: nc.OptimState,
    rng: np.random.Generator,
    params: nc.Params | None = None,
    batch_size: int = 32,
    holdout: float = 0.2,
):
    """Fit the autoencoder on ``corpus``; returns (params, per-epoch held-out MSE).

    The loss curve has ``epochs + 1`` entries, the first measured before any update.
    """
    if params is None:
        params = init_params(cfg, rng)
    corpus = np.asarray(corpus, dtype=np.float64)
    n_hold = max(1, int(round(len(corpus) * holdout))) if len(corpus) > 1 else 0
    order = rng.permutation(len(corpus))
    held = corpus[order[:n_hold]] if n_hold else corpus
    train = corpus[order[n_hold:]] if n_hold else corpus
    curve = [reconstruction_loss(held, params, cfg)]
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(train))
        for s in range(0, len(train), batch_size):
            batch = train[perm[s:s + batch_size]]
            _, grads = autoencoder_grads(batch, params, cfg)
            nc.sgd_step(params, grads, opt)
        loss = reconstruction_loss(held, params, cfg)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"autoencoder loss became non-finite at epoch {epoch}")
        curve.append(loss)
        log.info("encoder epoch %d held-out mse %.6f", epoch, loss)
    params.update(code_stats(corpus, params, cfg))
    return params, curve


def code_stats(corpus: np.ndarray, params: nc.Params, cfg: EncoderConfig, floor: float = 1e-4) -> nc.Params:
    """Per-dimension mean and std of the codes of ``corpus``.

    Glimpses of sparse grids are mostly empty, so raw codes vary very little
    between inputs; the agent standardizes them with these statistics.
    """
    codes = encode(np.asarray(corpus, dtype=np.float64), params, cfg)
    return {"enc.norm.mean": codes.mean(axis=0), "enc.norm.std": np.maximum(codes.std(axis=0), floor)}


def standardize(code: np.ndarray, params: nc.Params) -> np.ndarray:
    """Apply stored code statistics; identity when the encoder has none."""
    if "enc.norm.mean" not in params:
        return code
    return (code - params["enc.norm.mean"]) / params["enc.norm.std"]
