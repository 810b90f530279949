"""Procedural depth videos of walking people.

The body is a head sphere plus capsules (torso, upper/lower arms, thighs,
shanks), each capsule approximated by a dense chain of spheres. Joints are
driven sinusoidally by the identity's gait parameters and the scene is
ray-cast into a 16-bit millimetre depth image. Every identity knob
(body shape, gait period, stride, shoulder rotation, hip sway, speed) is an
independent cue that the recognizers can pick up.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .voxel import CameraIntrinsics, DepthFrame, ManifestEntry, write_pgm


class SynthError(RuntimeError):
    pass


# documented sampling ranges, (low, high) per field
PROFILE_RANGES: dict[str, tuple[float, float]] = {
    "height": (1.50, 1.95),
    "torso_radius": (0.12, 0.19),
    "head_radius": (0.085, 0.115),
    "arm_length": (0.55, 0.78),
    "leg_length": (0.74, 0.98),
    "gait_period": (16, 32),  # frames, integer
    "step_amplitude": (0.20, 0.55),
    "shoulder_rotation": (0.05, 0.40),
    "hip_sway": (1.0, 6.0),  # cm
    "walking_speed": (0.30, 0.60),
}


_MOTION_FIELDS = ("step_amplitude", "shoulder_rotation", "hip_sway", "walking_speed")


@dataclass(frozen=True)
class IdentityProfile:
    height: float  # m
    torso_radius: float  # m
    head_radius: float  # m
    arm_length: float  # m
    leg_length: float  # m
    gait_period: int  # frames
    step_amplitude: float  # rad
    shoulder_rotation: float  # rad
    hip_sway: float  # cm
    walking_speed: float  # m/s

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            # motion magnitudes may be zero (a static body); sizes may not
            if v < 0 or (v == 0 and f.name not in _MOTION_FIELDS):
                raise SynthError(f"profile field {f.name} must be positive")
        if self.gait_period < 4:
            raise SynthError("gait period must be at least 4 frames")

    def replace(self, **kw) -> "IdentityProfile":
        d = asdict(self)
        d.update(kw)
        return IdentityProfile(**d)


CAMERA_DEFAULTS = {
    # ceiling camera: landscape view along the walking direction
    "top-down": (160, 90, CameraIntrinsics(fx=200.0, fy=200.0, cx=79.5, cy=44.5)),
    # lens at 1 m, person walking toward the camera: portrait view
    "frontal": (100, 160, CameraIntrinsics(fx=150.0, fy=150.0, cx=49.5, cy=79.5)),
}


@dataclass(frozen=True)
class SynthConfig:
    identities: int = 6
    sequences_per_identity: int = 6
    train_per_identity: int = 4
    frames: int = 32
    camera: str = "top-down"  # or "frontal"
    # image size and intrinsics default per camera pose (see CAMERA_DEFAULTS)
    width: int | None = None
    height: int | None = None
    intrinsics: CameraIntrinsics | None = None
    camera_height: float = 3.0  # m; top-down: above the floor, frontal: lens height 1.0 m
    camera_distance: float = 3.2  # m; frontal only, distance at frame 0
    noise_mm: float = 10.0
    fps: float = 30.0
    variation: bool = True  # per-sequence walking direction, speed, phase and clothing bulk
    seed: int = 0

    def __post_init__(self):
        if self.identities < 2:
            raise SynthError("need at least two identities")
        if self.camera not in ("top-down", "frontal"):
            raise SynthError(f"unknown camera pose {self.camera!r}")
        if not 0 <= self.train_per_identity <= self.sequences_per_identity:
            raise SynthError("train_per_identity must lie in [0, sequences_per_identity]")
        w, h, intr = CAMERA_DEFAULTS[self.camera]
        if self.width is None:
            object.__setattr__(self, "width", w)
        if self.height is None:
            object.__setattr__(self, "height", h)
        if self.intrinsics is None:
            object.__setattr__(self, "intrinsics", intr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = self.intrinsics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if isinstance(d.get("intrinsics"), dict):
            d["intrinsics"] = CameraIntrinsics(**d["intrinsics"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SynthError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**d)


def sample_identities(C: int, seed: int) -> list[IdentityProfile]:
    """``C`` profiles, each drawn from ``PROFILE_RANGES`` with its own child seed."""
    if C < 2:
        raise SynthError("need at least two identities")
    out = []
    for child in np.random.SeedSequence(seed).spawn(C):
        rng = np.random.default_rng(child)
        vals = {}
        for name, (lo, hi) in PROFILE_RANGES.items():
            vals[name] = int(rng.integers(lo, hi + 1)) if name == "gait_period" else float(rng.uniform(lo, hi))
        out.append(IdentityProfile(**vals))
    return out


# ---------------------------------------------------------------- body model


@dataclass(frozen=True)
class SequenceVariation:
    direction: float = 1.0
    speed_scale: float = 1.0
    phase: float = 0.0
    bulk: float = 1.0
    start: float = 0.0  # metres along the walking axis


def sample_variation(rng: np.random.Generator) -> SequenceVariation:
    return SequenceVariation(
        direction=float(rng.choice([-1.0, 1.0])),
        speed_scale=float(rng.uniform(0.9, 1.1)),
        phase=float(rng.uniform(0.0, 2 * np.pi)),
        bulk=float(rng.uniform(0.95, 1.10)),
        start=float(rng.uniform(-0.1, 0.1)),
    )


def _chain(a: np.ndarray, b: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    n = max(2, int(np.ceil(np.linalg.norm(b - a) / (0.4 * r))) + 1)
    s = np.linspace(0.0, 1.0, n)[:, None]
    return a + s * (b - a), np.full(n, r)


def body_spheres(p: IdentityProfile, t: int, fps: float, var: SequenceVariation = SequenceVariation()):
    """Sphere centres (world metres; x walking axis, y lateral, z up) and radii at frame ``t``."""
    # reduce t first so frames exactly one period apart share bit-identical poses
    phase = 2 * np.pi * (t % p.gait_period) / p.gait_period + var.phase
    s = np.sin(phase)
    d = var.direction
    speed = p.walking_speed * var.speed_scale
    # the walk is centred on the camera axis over one nominal 32-frame pass
    x0 = var.start + d * speed * (t - 16) / fps
    sway = p.hip_sway / 100.0 * s
    pelvis = np.array([x0, sway, p.leg_length])
    r_torso = p.torso_radius * var.bulk
    neck_z = p.height - 2 * p.head_radius - 0.04
    neck = np.array([x0, 0.3 * sway, neck_z])
    yaw = p.shoulder_rotation * s
    # lateral unit vector of the shoulders after rotating about the vertical axis
    lat = np.array([np.sin(yaw) * d, np.cos(yaw), 0.0])
    hip_lat = np.array([0.0, 1.0, 0.0])
    parts = [
        (np.array([[x0 + d * 0.02, 0.3 * sway, p.height - p.head_radius]]), np.array([p.head_radius])),
        _chain(pelvis, neck - np.array([0, 0, 0.5 * r_torso]), r_torso),
    ]
    fwd = np.array([d, 0.0, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    shoulder_z = neck_z - 0.05
    half_w = 1.35 * r_torso
    upper_arm, fore_arm = 0.55 * p.arm_length, 0.45 * p.arm_length
    shoulder_c = np.array([x0, 0.3 * sway, shoulder_z])
    parts.append(_chain(shoulder_c - half_w * lat, shoulder_c + half_w * lat, 0.6 * r_torso))
    thigh, shank = 0.5 * p.leg_length, 0.5 * p.leg_length
    for side in (-1.0, 1.0):
        # arms swing opposite to the leg on the same side
        sh = np.array([x0, 0.3 * sway, shoulder_z]) + side * half_w * lat
        a_arm = -side * 0.8 * p.step_amplitude * s
        elbow = sh + upper_arm * (-np.cos(a_arm) * up + np.sin(a_arm) * fwd)
        a_fore = a_arm + 0.25
        hand = elbow + fore_arm * (-np.cos(a_fore) * up + np.sin(a_fore) * fwd)
        parts.append(_chain(sh, elbow, 0.05))
        parts.append(_chain(elbow, hand, 0.045))
        hip = pelvis + side * 0.5 * r_torso * hip_lat
        a_leg = side * p.step_amplitude * s
        knee = hip + thigh * (-np.cos(a_leg) * up + np.sin(a_leg) * fwd)
        bend = 0.6 * p.step_amplitude * (1.0 + np.cos(phase + (0 if side > 0 else np.pi)))
        a_shank = a_leg - bend
        foot = knee + shank * (-np.cos(a_shank) * up + np.sin(a_shank) * fwd)
        parts.append(_chain(hip, knee, 0.07))
        parts.append(_chain(knee, foot, 0.055))
    centres = np.concatenate([c for c, _ in parts])
    radii = np.concatenate([r for _, r in parts])
    return centres, radii


def world_to_camera(pts: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    if cfg.camera == "top-down":
        return np.column_stack([x, y, cfg.camera_height - z])
    # frontal camera at lens height 1.0 m, person walking along +x toward it
    return np.column_stack([y, 1.0 - z, cfg.camera_distance - x])


def raycast(centres: np.ndarray, radii: np.ndarray, intr: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    """Z-buffer depth (metres, 0 = background) of a union of spheres in camera coordinates."""
    depth = np.zeros((height, width))
    if np.any(centres[:, 2] - radii <= 0.05):
        raise SynthError("subject intersects or lies behind the camera plane")
    # projected bounding box of the whole body
    u = centres[:, 0] / centres[:, 2] * intr.fx + intr.cx
    v = centres[:, 1] / centres[:, 2] * intr.fy + intr.cy
    ru = radii / (centres[:, 2] - radii) * intr.fx
    rv = radii / (centres[:, 2] - radii) * intr.fy
    if np.any(u < 0) or np.any(u > width - 1) or np.any(v < 0) or np.any(v > height - 1):
        raise SynthError("subject leaves the camera frustum")
    u0, u1 = int(max(np.floor((u - ru).min()), 0)), int(min(np.ceil((u + ru).max()), width - 1))
    v0, v1 = int(max(np.floor((v - rv).min()), 0)), int(min(np.ceil((v + rv).max()), height - 1))
    uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
    rays = np.column_stack([(uu.ravel() - intr.cx) / intr.fx, (vv.ravel() - intr.cy) / intr.fy, np.ones(uu.size)])
    rr = np.sum(rays * rays, axis=1)[:, None]
    rc = rays @ centres.T
    cc = np.sum(centres * centres, axis=1) - radii ** 2
    disc = rc * rc - rr * cc[None, :]
    hit = disc >= 0
    s = np.where(hit, (rc - np.sqrt(np.where(hit, disc, 0.0))) / rr, np.inf)
    z = s.min(axis=1)
    z[~np.isfinite(z)] = 0.0
    depth[v0:v1 + 1, u0:u1 + 1] = z.reshape(uu.shape)
    return depth


def render_sequence(
    profile: IdentityProfile,
    cfg: SynthConfig,
    rng: np.random.Generator,
    label: int = 0,
    variation: SequenceVariation | None = None,
) -> tuple[list[DepthFrame], int]:
    """Render ``cfg.frames`` depth frames of one walk. Returns (frames, label)."""
    if cfg.frames < profile.gait_period:
        raise SynthError(f"{cfg.frames} frames do not cover a gait period of {profile.gait_period}")
    if variation is None:
        variation = sample_variation(rng) if cfg.variation else SequenceVariation()
    frames = []
    min_pixels = 0.05 * cfg.width * cfg.height
    for t in range(cfg.frames):
        centres, radii = body_spheres(profile, t, cfg.fps, variation)
        depth = raycast(world_to_camera(centres, cfg), radii, cfg.intrinsics, cfg.width, cfg.height)
        valid = depth > 0
        if valid.sum() < min_pixels:
            raise SynthError(f"frame {t}: subject covers only {valid.sum()} pixels")
        mm = depth * 1000.0
        if cfg.noise_mm > 0:
            mm = mm + valid * rng.normal(0.0, cfg.noise_mm, size=mm.shape)
        mm = np.where(valid, np.clip(np.rint(mm), 1, 65535), 0).astype(np.uint16)
        frames.append(DepthFrame(mm, t))
    return frames, label


def sequence_rng(seed: int, person: int, n: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, person, n]))


def emit_dataset(cfg: SynthConfig, out_dir: str | os.PathLike) -> dict:
    """Write ``person_{id}/seq_{n}/frame_{t}.pgm`` plus ``manifest.json``.

    The first ``train_per_identity`` sequences of each person go to the train
    split, the rest to test. Returns the manifest dictionary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profiles = sample_identities(cfg.identities, cfg.seed)
    entries = []
    for pid, prof in enumerate(profiles, 1):
        for n in range(cfg.sequences_per_identity):
            rng = sequence_rng(cfg.seed, pid, n)
            frames, _ = render_sequence(prof, cfg, rng, label=pid - 1)
            rel = Path(f"person_{pid}") / f"seq_{n}"
            (out / rel).mkdir(parents=True, exist_ok=True)
            for fr in frames:
                write_pgm(out / rel / f"frame_{fr.index:03d}.pgm", fr.values)
            split = "train" if n < cfg.train_per_identity else "test"
            entries.append(ManifestEntry(f"p{pid}_s{n}", pid, split, str(rel / "frame_*.pgm"), cfg.intrinsics))
    manifest = {
        "generator": "depthram.synth",
        "config": cfg.to_dict(),
        "profiles": [asdict(p) for p in profiles],
        "sequences": [e.to_dict() for e in entries],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
