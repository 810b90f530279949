"""Command-line entry point: ``depthram <command> [flags]``.

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
runtime failures (missing files, bad checkpoints, label-space mismatches).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, metrics, synth, trainer, viz
from . import encoder as enc
from .glimpse import grid_view
from .voxel import VoxelError, load_dataset, load_manifest

log = logging.getLogger("depthram")


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return raw


def _load_split(data: str, split: str, labels: dict[int, int] | None = None):
    try:
        return load_dataset(data, split, labels=labels)
    except (OSError, KeyError, VoxelError) as e:
        raise RuntimeFailure(f"cannot load dataset {data}: {e}") from e


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = synth.SynthConfig.from_dict(raw)
    except (TypeError, ValueError, synth.SynthError) as e:
        raise UsageError(f"bad synth config: {e}") from e
    manifest = synth.emit_dataset(cfg, args.out)
    n_frames = len(manifest["sequences"]) * cfg.frames
    print(f"wrote {n_frames} frames in {len(manifest['sequences'])} sequences to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    raw = _read_json(args.config)
    if args.dims is not None:
        raw["dims"] = args.dims
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        pcfg = enc.PretrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad pretraining config: {e}") from e
    seqs, labels = _load_split(args.data, "train")
    if not seqs:
        raise RuntimeFailure("training split is empty")
    rng = np.random.default_rng(pcfg.seed)
    if pcfg.dims == 4:
        grids = [grid_view(s.tensor, 4) for s in seqs]
    else:
        grids = [grid_view(s.tensor, pcfg.dims, t) for s in seqs for t in range(s.tensor.frames)]
    corpus = enc.sample_corpus(grids, pcfg.corpus, rng, pcfg.glimpse, pcfg.near_occupied)
    ecfg = pcfg.encoder
    params, curve = enc.pretrain(corpus, ecfg, pcfg.epochs, pcfg.optim_state(), rng, batch_size=pcfg.batch_size, holdout=pcfg.holdout)
    meta = {"kind": "encoder", "encoder": ecfg.to_dict(), "pretrain": raw | {"dims": pcfg.dims, "seed": pcfg.seed}, "loss_curve": curve}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(args.out, params, meta)
    print(f"held-out mse {curve[0]:.6f} -> {curve[-1]:.6f}; encoder saved to {args.out}")
    return 0


def cmd_train(args) -> int:
    raw = _read_json(args.config)
    if args.dims is not None:
        raw["dims"] = args.dims
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        unknown = set(raw) - set(trainer.TrainConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        cfg = trainer.TrainConfig(**raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad train config: {e}") from e
    if not Path(args.encoder).is_file():
        raise RuntimeFailure(f"encoder checkpoint not found: {args.encoder}")
    try:
        eparams, emeta = checkpoint.load(args.encoder)
    except (OSError, checkpoint.CheckpointError) as e:
        raise RuntimeFailure(str(e)) from e
    train, labels = _load_split(args.data, "train")
    val = None
    if args.val:
        val, _ = _load_split(args.data, "test", labels)
    expected = cfg.ram_config(len(labels)).encoder.to_dict()
    if emeta.get("encoder") != expected:
        raise RuntimeFailure(f"encoder checkpoint {args.encoder} does not match a {cfg.dims}D agent: {emeta.get('encoder')} != {expected}")
    eparams = {k: v for k, v in eparams.items() if k.startswith("enc.")}
    label_meta = {"labels": [pid for pid, _ in sorted(labels.items(), key=lambda kv: kv[1])]}
    trainer.fit(train, val, cfg, len(labels), eparams, args.out, meta=label_meta)
    print(f"trained {cfg.epochs} epochs; checkpoints and train_log.csv in {args.out}")
    return 0


def _load_model(path: str):
    try:
        return trainer.load_model(path)
    except (OSError, KeyError, checkpoint.CheckpointError) as e:
        raise RuntimeFailure(f"cannot load checkpoint {path}: {e}") from e


def _labels_for(meta: dict, rcfg, data: str) -> dict[int, int]:
    """The checkpoint's class map, checked against the manifest's identities."""
    try:
        entries = load_manifest(Path(data) / "manifest.json")
    except (OSError, KeyError, VoxelError) as e:
        raise RuntimeFailure(f"cannot read manifest in {data}: {e}") from e
    found = sorted({e.person_id for e in entries})
    pids = meta.get("labels") or found
    if len(found) != rcfg.n_classes or len(pids) != rcfg.n_classes or set(found) != set(pids):
        raise RuntimeFailure(f"label space mismatch: checkpoint has C={rcfg.n_classes}, manifest has C={len(found)}")
    return {pid: i for i, pid in enumerate(pids)}


def cmd_eval(args) -> int:
    params, rcfg, meta = _load_model(args.ckpt)
    labels = _labels_for(meta, rcfg, args.data)
    seqs, _ = _load_split(args.data, args.split, labels)
    if not seqs:
        raise RuntimeFailure(f"split {args.split!r} is empty")
    per_frame = args.mode == "single" and rcfg.dims == 4
    probs, y, _, ids = trainer.predict(seqs, params, rcfg, per_frame=per_frame)
    if args.mode == "multi" and rcfg.dims != 4:
        scores, y, _ = metrics.aggregate(probs, y, ids, args.scheme)
    else:
        scores = np.log(np.maximum(probs, 1e-300))
    report = metrics.cmc(scores, y)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out, out.with_suffix(".csv"))
    print(f"top-1 {report.top1:.2f}%  nAUC {report.nauc:.2f}  ({report.n} {'sequences' if args.mode == 'multi' else 'items'})")
    return 0


def cmd_visualize(args) -> int:
    params, rcfg, meta = _load_model(args.ckpt)
    labels = _labels_for(meta, rcfg, args.data)
    seqs, _ = _load_split(args.data, args.split, labels)
    if not seqs:
        raise RuntimeFailure(f"split {args.split!r} is empty")
    _, _, traces, _ = trainer.predict(seqs, params, rcfg)
    shape_xy = tuple(seqs[0].tensor.dims[:2])
    summary = viz.write_outputs(traces, shape_xy, args.out, sigma=args.sigma)
    print(f"{summary['episodes']} episodes, {summary['backward_jumps']} backward time jumps; outputs in {args.out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="depthram", description="Recurrent attention over 4D depth-video voxel grids.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic depth-video dataset")
    s.add_argument("--config", help="SynthConfig JSON (defaults when omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain-encoder", help="train the glimpse autoencoder offline")
    s.add_argument("--config", help="PretrainConfig JSON (defaults when omitted)")
    s.add_argument("--data", required=True, help="dataset directory with manifest.json")
    s.add_argument("--out", required=True, help="encoder checkpoint path")
    s.add_argument("--dims", type=int, choices=(2, 3, 4), help="agent dimensionality the encoder serves")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="train the attention agent")
    s.add_argument("--config", help="TrainConfig JSON (defaults when omitted)")
    s.add_argument("--data", required=True, help="dataset directory with manifest.json")
    s.add_argument("--encoder", required=True, help="pretrained encoder checkpoint")
    s.add_argument("--out", required=True, help="output directory for checkpoints and the log")
    s.add_argument("--dims", type=int, choices=(2, 3, 4), help="4D video, 3D frame or 2D silhouette agent")
    s.add_argument("--val", action="store_true", help="select best.g4d by top-1 on the test split instead of train reward")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint and write an EvalReport")
    s.add_argument("--ckpt", required=True, help="agent checkpoint")
    s.add_argument("--data", required=True, help="dataset directory with manifest.json")
    s.add_argument("--mode", choices=("single", "multi"), default="multi",
                   help="single: one frame per item; multi: one prediction per sequence")
    s.add_argument("--scheme", choices=("vote", "mean-logprob"), default="mean-logprob",
                   help="multi-shot aggregation for 3D/2D agents")
    s.add_argument("--split", choices=("train", "test"), default="test", help="manifest split to score")
    s.add_argument("--out", required=True, help="report JSON path; the CMC CSV is written next to it")
    s.add_argument("--seed", type=int, help="accepted for uniformity; evaluation is deterministic")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("visualize", help="export glimpse paths, a visit heatmap and time traces")
    s.add_argument("--ckpt", required=True, help="agent checkpoint")
    s.add_argument("--data", required=True, help="dataset directory with manifest.json")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--split", choices=("train", "test"), default="test", help="manifest split to roll out on")
    s.add_argument("--sigma", type=float, default=2.0, help="heatmap Gaussian sigma in cells")
    s.add_argument("--seed", type=int, help="accepted for uniformity; rollouts are deterministic")
    s.set_defaults(func=cmd_visualize)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"depthram: error: {e}", file=sys.stderr)
        return 1
    except (RuntimeFailure, OSError, VoxelError, checkpoint.CheckpointError, synth.SynthError,
            enc.TrainingDiverged, trainer.NonFiniteGradient) as e:
        print(f"depthram: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
