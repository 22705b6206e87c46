import json

import numpy as np
import pytest

from glucokin import frames, synth

SCENE = synth.SceneConfig()


def test_deterministic():
    a, ta = synth.generate_measurement(SCENE, 200.0, seed=5)
    b, tb = synth.generate_measurement(SCENE, 200.0, seed=5)
    c, _ = synth.generate_measurement(SCENE, 200.0, seed=6)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.calibration, b.calibration)
    assert ta.to_dict() == tb.to_dict()
    assert not np.array_equal(a.frames, c.frames)


def test_mask_partitions_frame():
    for seed in range(20):
        _, t = synth.generate_measurement(SCENE, 100.0, seed=seed)
        values = set(np.unique(t.mask).tolist())
        assert values <= {synth.BACKGROUND, synth.ROI, synth.EDGE, synth.ARTEFACT}
        assert synth.ROI in values and synth.BACKGROUND in values
        assert t.mask.shape == (SCENE.rows, SCENE.cols)


def test_truth_consistent_with_kinetics():
    kin = synth.KineticDefaults()
    _, t = synth.generate_measurement(SCENE, 300.0, kin, seed=1)
    assert t.r_c == pytest.approx(float(kin.r_c(300.0)))
    assert t.tau == pytest.approx(kin.delta_tau * t.r_c + kin.tau0)
    assert t.r_c < t.r_d < SCENE.background
    assert abs(t.n_drop - SCENE.n_drop) <= SCENE.drop_jitter
    assert kin.r_c(synth.G_MIN) == 95.0 and kin.r_c(synth.G_MAX) == 45.0


def test_roi_mean_matches_curve():
    m, t = synth.generate_measurement(SCENE, 250.0, seed=3)
    norm, _ = frames.preprocess(m)
    kin = synth.KineticDefaults()
    n = np.array([t.n_drop + 5, t.n_drop + 100, SCENE.n_frames - 1])
    expect = synth.roi_curve(t, SCENE, kin, n)
    roi = t.mask == synth.ROI
    # per-pixel noise: frame noise plus the calibration mean's noise
    sigma = SCENE.noise_sigma * np.sqrt(1 + 1 / (SCENE.n_calibration - 1))
    for k, want in zip(n, expect):
        got = norm[k][roi].mean()
        assert abs(got - want) <= 3 * sigma / np.sqrt(roi.sum()) + 0.05


def test_background_drift_starts_at_drop():
    lvl = synth.background_level(SCENE, np.arange(SCENE.n_frames), n_drop=60)
    assert np.all(lvl[:61] == SCENE.background)
    assert lvl[-1] == pytest.approx(SCENE.background + SCENE.drift)


def test_low_glucose_contrast_is_small():
    kin = synth.KineticDefaults()
    _, t = synth.generate_measurement(SCENE, synth.G_MIN, kin, seed=0)
    late = synth.roi_curve(t, SCENE, kin, SCENE.n_frames - 1)
    bg = synth.background_level(SCENE, SCENE.n_frames - 1, t.n_drop)
    assert 0 < bg - late < 5


def test_dataset_ids_and_seeds():
    cases = synth.generate_dataset([100.0, 200.0], repeats=3, seed=9, prefix="x")
    assert [c.id for c in cases] == [f"x{k:04d}" for k in range(6)]
    assert [c.glucose for c in cases] == [100.0] * 3 + [200.0] * 3
    assert len({c.seed for c in cases}) == 6
    assert cases == synth.generate_dataset([100.0, 200.0], repeats=3, seed=9, prefix="x")


def test_validation():
    with pytest.raises(ValueError):
        synth.generate_dataset([10.0])
    with pytest.raises(ValueError):
        synth.generate_dataset([100.0], repeats=0)
    with pytest.raises(ValueError):
        synth.generate_measurement(SCENE, 700.0)
    with pytest.raises(ValueError):
        synth.SceneConfig(rows=10, cols=10)
    with pytest.raises(ValueError):
        synth.SceneConfig(n_frames=65)


def test_write_dataset(tmp_path):
    scene = synth.SceneConfig(n_frames=80)
    cases = synth.generate_dataset([100.0], repeats=2, seed=1)
    path = synth.write_dataset(tmp_path, cases, scene, seed=1)
    man = synth.read_manifest(path)
    assert [e["id"] for e in man["measurements"]] == ["m0000", "m0001"]
    m = frames.read_container(tmp_path / man["measurements"][0]["file"])
    direct, _ = cases[0].generate(scene)
    # containers store little-endian float32
    assert np.array_equal(m.frames, direct.frames.astype(np.float32))
    assert m.glucose == 100.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"x": 1}))
    with pytest.raises(ValueError):
        synth.read_manifest(bad)
