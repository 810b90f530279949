import filecmp
import json

import numpy as np
import pytest

from depthram import metrics, synth
from depthram.voxel import LabeledSequence, backproject, read_pgm, voxelize

from conftest import tiny_synth_config


def profile(**kw):
    base = dict(height=1.75, torso_radius=0.15, head_radius=0.1, arm_length=0.65, leg_length=0.85, gait_period=20,
                step_amplitude=0.4, shoulder_rotation=0.2, hip_sway=3.0, walking_speed=0.45)
    base.update(kw)
    return synth.IdentityProfile(**base)


def test_profile_validation():
    with pytest.raises(synth.SynthError):
        profile(height=0.0)
    with pytest.raises(synth.SynthError):
        profile(gait_period=3)
    profile(step_amplitude=0.0, walking_speed=0.0)


def test_config_validation():
    with pytest.raises(synth.SynthError):
        synth.SynthConfig(identities=1)
    with pytest.raises(synth.SynthError):
        synth.SynthConfig(camera="oblique")
    with pytest.raises(synth.SynthError):
        synth.SynthConfig.from_dict({"colour": 1})
    c = synth.SynthConfig.from_dict(synth.SynthConfig(camera="frontal").to_dict())
    assert c == synth.SynthConfig(camera="frontal")


def test_sample_identities_deterministic_and_distinct():
    assert synth.sample_identities(4, 9) == synth.sample_identities(4, 9)
    a, b = synth.sample_identities(2, 0)
    assert a != b
    with pytest.raises(synth.SynthError):
        synth.sample_identities(1, 0)


def test_sampled_fields_stay_in_documented_ranges():
    profs = [p for s in range(100) for p in synth.sample_identities(10, s)]
    assert len(profs) == 1000
    for name, (lo, hi) in synth.PROFILE_RANGES.items():
        v = np.array([getattr(p, name) for p in profs])
        assert lo <= v.min() and v.max() <= hi, name


def test_static_body_frames_identical_before_noise():
    p = profile(step_amplitude=0.0, shoulder_rotation=0.0, hip_sway=0.0, walking_speed=0.0)
    cfg = synth.SynthConfig(frames=20, noise_mm=0.0)
    frames, label = synth.render_sequence(p, cfg, np.random.default_rng(0), label=3)
    assert label == 3 and len(frames) == 20
    assert all(np.array_equal(frames[0].values, f.values) for f in frames)


@pytest.mark.parametrize("camera", ["top-down", "frontal"])
def test_frames_repeat_after_one_period(camera):
    p = profile(walking_speed=0.0, gait_period=16)
    cfg = synth.SynthConfig(frames=32, noise_mm=0.0, camera=camera)
    frames, _ = synth.render_sequence(p, cfg, np.random.default_rng(0))
    for t in range(16):
        assert np.array_equal(frames[t].values, frames[t + 16].values)
    assert not np.array_equal(frames[0].values, frames[4].values)


def test_taller_profile_covers_more_pixels():
    cfg = synth.SynthConfig(frames=20, noise_mm=0.0, variation=False)
    short, _ = synth.render_sequence(profile(height=1.55), cfg, np.random.default_rng(0))
    tall, _ = synth.render_sequence(profile(height=1.90), cfg, np.random.default_rng(0))
    assert (tall[0].values > 0).sum() > (short[0].values > 0).sum()


def test_subject_coverage_and_noise():
    cfg = synth.SynthConfig(frames=20, noise_mm=10.0)
    frames, _ = synth.render_sequence(profile(), cfg, np.random.default_rng(1))
    for f in frames:
        assert (f.values > 0).mean() >= 0.05 and f.values.dtype == np.uint16
    clean, _ = synth.render_sequence(profile(), synth.SynthConfig(frames=20, noise_mm=0.0), np.random.default_rng(1))
    diff = frames[0].values.astype(float) - clean[0].values.astype(float)
    mask = clean[0].values > 0
    assert 8.0 < diff[mask].std() < 12.0


def test_out_of_frustum_raises():
    with pytest.raises(synth.SynthError, match="frustum"):
        synth.render_sequence(profile(), synth.SynthConfig(frames=20, width=20, height=20), np.random.default_rng(0))
    with pytest.raises(synth.SynthError):
        synth.render_sequence(profile(), synth.SynthConfig(frames=20, camera_height=1.5), np.random.default_rng(0))


def test_too_few_frames_for_period():
    with pytest.raises(synth.SynthError):
        synth.render_sequence(profile(gait_period=24), synth.SynthConfig(frames=20), np.random.default_rng(0))


def test_emit_counts(tmp_path, monkeypatch):
    # 8 frames per sequence need a period no longer than 8
    real = synth.sample_identities
    monkeypatch.setattr(synth, "sample_identities", lambda C, s: [p.replace(gait_period=8) for p in real(C, s)])
    cfg = synth.SynthConfig(identities=2, sequences_per_identity=1, train_per_identity=1, frames=8)
    m = synth.emit_dataset(cfg, tmp_path)
    assert len(list(tmp_path.rglob("*.pgm"))) == 16
    assert len(m["sequences"]) == 2
    assert json.loads((tmp_path / "manifest.json").read_text())["sequences"] == m["sequences"]
    assert read_pgm(tmp_path / "person_1" / "seq_0" / "frame_000.pgm").dtype == np.uint16


def test_emit_is_byte_identical_per_seed(tmp_path):
    cfg = tiny_synth_config(identities=2, sequences_per_identity=1)
    synth.emit_dataset(cfg, tmp_path / "a")
    synth.emit_dataset(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [str(f) for f in files], shallow=False)
    assert not mismatch and not errors


def test_split_is_disjoint_with_shared_identities(tiny_dataset):
    root, train, test, labels = tiny_dataset
    assert {s.sequence_id for s in train}.isdisjoint({s.sequence_id for s in test})
    assert {s.label for s in train} == {s.label for s in test} == {0, 1}


def test_ingest_back_keeps_every_in_bounds_point(tiny_dataset):
    _, train, test, _ = tiny_dataset
    for s in train + test:
        assert s.tensor.frames == 32 and len(s.tensor) > 0
        # independent count of points outside the centroid-centred box
        pts = np.concatenate(s.points)
        rel = pts - pts.mean(axis=0)
        half = np.array([1.25, 0.5, 1.0])
        outside = np.any((rel < -half) | (rel >= half), axis=1).sum()
        assert abs(s.tensor.dropped - outside) <= 0.001 * len(pts)
        # unique cells among kept points match the stored occupancy
        assert len(s.tensor) <= len(pts) - s.tensor.dropped


def extreme_sequences(noise=0.0, n=2):
    lo = {k: v[0] for k, v in synth.PROFILE_RANGES.items()}
    hi = {k: v[1] for k, v in synth.PROFILE_RANGES.items()}
    cfg = synth.SynthConfig(frames=32, noise_mm=noise)
    out = []
    for label, vals in enumerate((lo, hi)):
        p = synth.IdentityProfile(**vals)
        for n_ in range(n):
            frames, _ = synth.render_sequence(p, cfg, synth.sequence_rng(0, label, n_), label)
            pts = [backproject(f, cfg.intrinsics) for f in frames]
            out.append(LabeledSequence(voxelize(pts), label, f"{label}_{n_}", pts))
    return out


def test_gei_separates_extreme_identities():
    seqs = extreme_sequences()
    train = [s for s in seqs if s.sequence_id.endswith("_0")]
    test = [s for s in seqs if s.sequence_id.endswith("_1")]
    report, _ = metrics.gei_baseline(train, test, 2)
    assert report.top1 == 100.0
