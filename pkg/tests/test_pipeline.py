import json

import numpy as np
import pytest

from glucokin import pipeline, synth
from glucokin.kinetics import KineticModelParams

PARAMS = synth.KineticDefaults().params()
CFG = pipeline.PipelineConfig()


@pytest.fixture(scope="module")
def measurement():
    return synth.generate_measurement(synth.SceneConfig(), 300.0, seed=11)


@pytest.fixture(scope="module")
def trained():
    cases = synth.generate_dataset([100.0, 300.0, 500.0], repeats=2, seed=4, prefix="t")
    items = [(c.id, c.generate()[0]) for c in cases]
    return pipeline.train(items, CFG, source="unit")


def test_config_roundtrip(tmp_path):
    cfg = CFG.replace(variant="ssms", bandwidth=None)
    assert cfg.variant == "ssms" and cfg.bandwidth == CFG.bandwidth
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert pipeline.load_config(path) == cfg
    with pytest.raises(ValueError):
        pipeline.PipelineConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        pipeline.PipelineConfig(variant="x")
    with pytest.raises(ValueError):
        pipeline.PipelineConfig(method="x")
    with pytest.raises(ValueError):
        pipeline.PipelineConfig(kinetics_path=str(tmp_path / "missing.json"))
    assert CFG.replace(spatial=True).kernel.scales(3).tolist() == [0.6, 4.0, 4.0]


def test_kinetics_file_roundtrip(tmp_path):
    p = KineticModelParams(0.001, -0.1, 0.02)
    pipeline.save_kinetics(p, tmp_path / "k.json")
    assert pipeline.load_kinetics(tmp_path / "k.json") == p


def test_features():
    frame = np.arange(6.0).reshape(2, 3)
    assert pipeline.features(frame, False).shape == (6,)
    f = pipeline.features(frame, True)
    assert f.shape == (6, 3)
    assert f[:, 0].tolist() == [0.0, 3.0, 1.0, 4.0, 2.0, 5.0]  # column-major


def test_run_pipeline_tracks_both_methods(measurement):
    m, truth = measurement
    res = pipeline.run_pipeline(m, CFG, PARAMS, methods=("standard",), mid="a")
    assert truth.n_drop <= res.n_drop <= truth.n_drop + 3
    assert set(res.decisions) == {"ekf", "standard"}
    assert res.complete and res.decision.method == "ekf"
    assert res.decisions["ekf"].n_c < res.decisions["standard"].n_c
    assert res.r_c_hat == pytest.approx(truth.r_c, abs=1.5)
    assert res.frames[0].n == res.n_drop
    assert res.g_hat is None
    d = res.to_dict()
    assert d["id"] == "a" and d["n_D"] == res.n_drop
    assert "timings" not in json.dumps(d)


def test_ekf_requires_params(measurement):
    with pytest.raises(ValueError):
        pipeline.run_pipeline(measurement[0], CFG)


def test_no_drop_in_truncated_measurement(measurement):
    m, truth = measurement
    res = pipeline.run_pipeline(m, CFG, PARAMS, max_frames=truth.n_drop - 5)
    assert res.n_drop is None and not res.complete
    assert res.frames == []


def test_train_and_estimate(trained, measurement):
    params = trained.params
    kin = synth.KineticDefaults()
    assert params.delta_tau == pytest.approx(kin.delta_tau, rel=0.5)
    assert params.tau0 == pytest.approx(kin.tau0, rel=0.3)
    assert 0 < params.noise_var < 0.1
    assert len(trained.curve.knots) >= 2
    res = pipeline.run_pipeline(measurement[0], CFG, params, trained.curve)
    assert res.g_hat == pytest.approx(300.0, rel=0.2)


def test_run_many_sorted_and_report(trained):
    cases = synth.generate_dataset([150.0, 450.0], repeats=1, seed=77, prefix="z")
    items = [(c.id, c.generate()[0]) for c in reversed(cases)]
    results = pipeline.run_many(items, CFG, trained.params, trained.curve)
    assert [r.id for r in results] == ["z0000", "z0001"]
    rep = pipeline.report(results)
    assert rep.n == 2
    with pytest.raises(ValueError):
        pipeline.report([])


def test_write_results(tmp_path, measurement):
    res = pipeline.run_pipeline(measurement[0], CFG.replace(method="standard"), mid="s")
    pipeline.write_results([res], tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["results"][0]["id"] == "s"
