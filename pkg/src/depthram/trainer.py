"""Hybrid training of the attention agent.

The class head is trained with cross-entropy on the last step's prediction;
the location head with REINFORCE on the Gaussian log-density of the chosen
glimpse locations, weighted by the 0/1 episode reward minus a baseline. Both
signals flow back through the shared LSTM.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import numcore as nc
from . import ram
from .glimpse import GlimpseConfig, SparseGrid, grid_view
from .voxel import AugmentConfig, LabeledSequence, augment

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 20
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.5
    episodes: int = 4
    epochs: int = 100
    seed: int = 0
    baseline: str = "ema"
    ema_decay: float = 0.9
    reinforce_weight: float = 1.0  # scale of the policy term in the hybrid loss
    clip_norm: float = 0.0  # global gradient-norm limit; 0 disables clipping
    dims: int = 4
    hidden: int = 256
    sigma: float = 0.15
    steps: int = 8
    glimpse_size: int = 8
    glimpse_patches: int = 5
    augment: bool = True
    jitter_sigma: float = 0.05
    shift: float = 0.05
    scale_min: float = 0.8
    scale_max: float = 1.2
    random_start: bool = False
    per_step_loss: bool = False
    fine_tune_encoder: bool = False
    checkpoint_every: int = 0
    frames_per_sequence: int = 1  # 3D/2D agents: distinct random frames drawn per sequence each epoch

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.episodes < 1:
            raise ValueError("episodes (M) must be >= 1")
        if self.reinforce_weight < 0:
            raise ValueError("reinforce_weight must be >= 0")
        if self.frames_per_sequence < 1:
            raise ValueError("frames_per_sequence must be >= 1")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if self.baseline not in ("ema", "none"):
            raise ValueError(f"baseline must be 'ema' or 'none', got {self.baseline!r}")

    def ram_config(self, n_classes: int) -> ram.RamConfig:
        return ram.RamConfig(
            n_classes=n_classes,
            dims=self.dims,
            hidden=self.hidden,
            sigma=self.sigma,
            steps=self.steps,
            glimpse=GlimpseConfig(self.glimpse_size, self.glimpse_patches),
            dropout=self.dropout,
            random_start=self.random_start,
            per_step_loss=self.per_step_loss,
            fine_tune_encoder=self.fine_tune_encoder,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.jitter_sigma, self.shift, (self.scale_min, self.scale_max))

    def optim_state(self) -> nc.OptimState:
        return nc.OptimState(self.lr, self.momentum, self.weight_decay)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class Baseline:
    """Scalar reward baseline; ``mode='none'`` pins it at zero."""

    mode: str = "ema"
    decay: float = 0.9
    value: float = 0.0
    started: bool = False

    def update(self, mean_reward: float) -> None:
        if self.mode == "none":
            return
        if not self.started:
            self.value, self.started = float(mean_reward), True
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * float(mean_reward)


def reinforce_grad(traces: list[ram.EpisodeTrace], baseline: float, sigma: float) -> np.ndarray:
    """Score-function estimate of d E[R] / d mu for every episode and step.

    Returns an array (M, T, D): entry i is (1/M) (R_i - b) grad_mu log N(phi; mu, sigma^2 I),
    i.e. (1/M) (R_i - b) (phi - mu) / sigma^2. Summing over episodes and
    backpropagating through the location head gives the policy gradient.
    """
    M = len(traces)
    mu = np.stack([tr.mu for tr in traces])
    phi = np.stack([tr.phi for tr in traces])
    adv = np.array([tr.reward for tr in traces]) - baseline
    return adv[:, None, None] * (phi - mu) / (sigma * sigma) / M


def _check_finite(grads: nc.Params) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in layer {name}")


@dataclass
class StepStats:
    mean_reward: float
    ce_loss: float
    top1: float
    baseline: float
    grad_norm: float = 0.0


def hybrid_step(
    grids: list[SparseGrid],
    labels: np.ndarray,
    params: nc.Params,
    rcfg: ram.RamConfig,
    tcfg: TrainConfig,
    opt: nc.OptimState,
    rng: np.random.Generator,
    baseline: Baseline,
) -> StepStats:
    """One optimizer step on a mini-batch; ``params`` is updated in place."""
    B, M = len(grids), tcfg.episodes
    ep_grids = [g for g in grids for _ in range(M)]
    ep_labels = np.repeat(np.asarray(labels, dtype=np.int64), M)
    roll = ram.run_episodes(ep_grids, ep_labels, params, rcfg, rng, train=True, keep_cache=True)
    rewards = np.array([tr.reward for tr in roll.traces])
    b = baseline.value if baseline.mode != "none" else 0.0
    # ascent direction per example, averaged over its M episodes
    dmu_asc = np.concatenate([reinforce_grad(roll.traces[i * M:(i + 1) * M], b, rcfg.sigma) for i in range(B)])
    dmu = [-tcfg.reinforce_weight * dmu_asc[:, t, :] / B for t in range(rcfg.steps)]
    weights = np.full(B * M, 1.0 / (B * M))
    grads = ram.backward(roll, params, rcfg, weights, dmu)
    _check_finite(grads)
    frozen = () if rcfg.fine_tune_encoder else ("enc.", "dec.")
    trainable = {k: g for k, g in grads.items() if not (frozen and k.startswith(frozen))}
    norm = nc.clip_by_global_norm(trainable, tcfg.clip_norm) if tcfg.clip_norm else nc.global_norm(trainable)
    nc.sgd_step(params, trainable, opt)
    final = roll.probs[-1]
    ce = -np.log(np.maximum(final[np.arange(B * M), ep_labels], 1e-300))
    baseline.update(rewards.mean())
    return StepStats(float(rewards.mean()), float(ce.mean()), float(rewards.mean()), b, norm)


# ---------------------------------------------------------------- inference


def example_grids(seq: LabeledSequence, dims: int, frames: list[int] | None = None) -> list[tuple[SparseGrid, int | None]]:
    """Agent inputs for one sequence: the whole video (4D) or one grid per frame (3D/2D)."""
    if dims == 4:
        return [(grid_view(seq.tensor, 4), None)]
    idx = range(seq.tensor.frames) if frames is None else frames
    return [(grid_view(seq.tensor, dims, t), t) for t in idx]


def epoch_examples(train: list[LabeledSequence], cfg: TrainConfig, rng: np.random.Generator) -> list[tuple[int, int | None]]:
    """(sequence index, frame) pairs for one epoch: whole videos for 4D, random frames otherwise."""
    if cfg.dims == 4:
        return [(j, None) for j in range(len(train))]
    out = []
    for j, seq in enumerate(train):
        k = min(cfg.frames_per_sequence, seq.tensor.frames)
        out.extend((j, int(t)) for t in rng.choice(seq.tensor.frames, k, replace=False))
    return out


def predict(
    seqs: list[LabeledSequence],
    params: nc.Params,
    rcfg: ram.RamConfig,
    per_frame: bool = False,
    chunk: int = 64,
) -> tuple[np.ndarray, np.ndarray, list[ram.EpisodeTrace], list[str]]:
    """Eval-mode rollouts. Returns (final-step probs, labels, traces, sequence ids per row).

    3D/2D agents always score single frames. A 4D agent scores whole videos,
    or with ``per_frame`` each frame as a one-frame video.
    """
    items: list[tuple[SparseGrid, int, str, int | None]] = []
    for s in seqs:
        if rcfg.dims == 4 and per_frame:
            for t in range(s.tensor.frames):
                fr = s.tensor.coords[s.tensor.coords[:, 3] == t].copy()
                fr[:, 3] = 0
                items.append((SparseGrid(fr, (*s.tensor.dims, 1)), s.label, s.sequence_id, t))
        else:
            for g, t in example_grids(s, rcfg.dims):
                items.append((g, s.label, s.sequence_id, t))
    probs, labels, traces, ids = [], [], [], []
    for i in range(0, len(items), chunk):
        part = items[i:i + chunk]
        roll = ram.run_episodes([p[0] for p in part], np.array([p[1] for p in part]), params, rcfg, train=False)
        for tr, p in zip(roll.traces, part):
            tr.sequence_id, tr.frame = p[2], p[3]
            probs.append(tr.probs[-1])
            labels.append(p[1])
            traces.append(tr)
            ids.append(p[2])
    return np.array(probs), np.array(labels, dtype=np.int64), traces, ids


def top1(probs: np.ndarray, labels: np.ndarray) -> float:
    if not len(labels):
        return float("nan")
    return float(np.mean(np.argmax(probs, axis=1) == labels) * 100.0)


# ---------------------------------------------------------------- fitting


@dataclass
class EpochRecord:
    epoch: int
    mean_reward: float
    ce_loss: float
    train_top1: float
    val_top1: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_reward", "ce_loss", "train_top1", "val_top1", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.mean_reward:.6f}", f"{r.ce_loss:.6f}", f"{r.train_top1:.4f}", f"{r.val_top1:.4f}", f"{r.seconds:.3f}"])


def checkpoint_meta(rcfg: ram.RamConfig, tcfg: TrainConfig, **extra) -> dict:
    return {"kind": "ram", "ram": rcfg.to_dict(), "train": asdict(tcfg), "seed": tcfg.seed, "dims": rcfg.dims, **extra}


def load_model(path: str | os.PathLike) -> tuple[nc.Params, ram.RamConfig, dict]:
    params, meta = checkpoint.load(path)
    if meta.get("kind") != "ram":
        raise checkpoint.CheckpointError(f"{path} is not an attention-model checkpoint")
    return params, ram.RamConfig.from_dict(meta["ram"]), meta


def fit(
    train: list[LabeledSequence],
    val: list[LabeledSequence] | None,
    cfg: TrainConfig,
    n_classes: int,
    encoder_params: nc.Params | None = None,
    out_dir: str | os.PathLike | None = None,
    meta: dict | None = None,
) -> tuple[nc.Params, TrainLog]:
    """Train an agent from scratch (encoder weights taken from ``encoder_params``).

    Writes ``ckpt_epoch{N}.g4d`` every ``checkpoint_every`` epochs, ``best.g4d``
    (best validation top-1, or best mean reward without a validation set),
    ``final.g4d`` and ``train_log.csv`` into ``out_dir`` when given. Entries
    of ``meta`` are added to every checkpoint header.
    """
    if not train:
        raise ValueError("training split is empty")
    if val is not None and not val:
        raise ValueError("validation split is empty")
    rcfg = cfg.ram_config(n_classes)
    rng = np.random.default_rng(cfg.seed)
    params = ram.init_params(rcfg, rng, encoder_params)
    opt = cfg.optim_state()
    baseline = Baseline(cfg.baseline, cfg.ema_decay)
    trainlog = TrainLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    acfg = cfg.augment_config()
    extra = dict(meta or {})
    best = -np.inf
    if out is not None and cfg.epochs == 0:
        checkpoint.save(out / "best.g4d", params, checkpoint_meta(rcfg, cfg, epoch=0, **extra))
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        examples = epoch_examples(train, cfg, rng)
        order = rng.permutation(len(examples))
        augmented: dict[int, LabeledSequence] = {}
        stats = []
        for s in range(0, len(order), cfg.batch_size):
            grids, labels = [], []
            for i in order[s:s + cfg.batch_size]:
                j, frame = examples[i]
                seq = augmented.get(j, train[j])
                if cfg.augment and seq.points and j not in augmented:
                    # one augmentation per sequence and epoch, shared by its frames
                    seq = augmented[j] = augment(seq, rng, acfg)
                grids.append(grid_view(seq.tensor, cfg.dims, frame))
                labels.append(seq.label)
            st = hybrid_step(grids, np.array(labels), params, rcfg, cfg, opt, rng, baseline)
            stats.append((st, len(grids)))
        n = sum(k for _, k in stats)
        mean_reward = sum(st.mean_reward * k for st, k in stats) / n
        ce = sum(st.ce_loss * k for st, k in stats) / n
        val_top1 = float("nan")
        if val:
            vp, vl, _, _ = predict(val, params, rcfg)
            val_top1 = top1(vp, vl)
        rec = EpochRecord(epoch, mean_reward, ce, mean_reward * 100.0, val_top1, time.perf_counter() - t0)
        trainlog.records.append(rec)
        log.info("epoch %d reward %.3f ce %.3f val %.1f max grad norm %.2f (%.1fs)", epoch, mean_reward, ce, val_top1,
                 max(st.grad_norm for st, _ in stats), rec.seconds)
        if out is not None:
            header = checkpoint_meta(rcfg, cfg, epoch=epoch, **extra)
            score = val_top1 if val else mean_reward
            if score > best:
                best = score
                checkpoint.save(out / "best.g4d", params, header)
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                checkpoint.save(out / f"ckpt_epoch{epoch}.g4d", params, header)
    if out is not None:
        checkpoint.save(out / "final.g4d", params, checkpoint_meta(rcfg, cfg, epoch=cfg.epochs, **extra))
        trainlog.write_csv(out / "train_log.csv")
    return params, trainlog
