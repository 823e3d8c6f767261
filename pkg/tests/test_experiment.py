import json

import numpy as np
import pytest

from cannarx import cli, experiment, imc
from cannarx.model import init_cannarx, save_model
from cannarx.plant import steady_state


def _record(err_scale=0.0, n=20, seed=0):
    rng = np.random.default_rng(seed)
    rec = imc._empty_record(n, 4, 2, 1.0)
    rec.r[:] = 5.0
    rec.y[:] = 5.0
    rec.y[1:] += err_scale * rng.normal(size=(n - 1, 4))
    rec.u[:] = 5.0
    rec.latency_us[:] = 50.0
    return rec


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("quick")
    manifest = experiment.reproduce_all(experiment.ExperimentConfig.quick(), out)
    return out, manifest


def test_config_round_trip_and_unknown_keys():
    cfg = experiment.ExperimentConfig.quick()
    back = experiment.ExperimentConfig.from_dict({**cfg.to_dict(), "preset": "quick"})
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        experiment.ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        experiment.ExperimentConfig.from_dict({"loop": {"horizon": 3}})
    with pytest.raises(ValueError):
        experiment.ExperimentConfig.from_dict({"variants": ["lstm"]})


def test_default_loop_duration_and_schedule():
    loop = experiment.LoopConfig()
    assert loop.duration == 600
    sched = experiment.reference_schedule(loop)
    assert [k for k, _ in sched] == [0, 150, 300, 450]
    assert np.allclose(sched[0][1], steady_state([5.0, 5.0]))


def test_rmse_and_variance_definitions():
    rec = _record(0.1)
    e = rec.y[1:] - rec.r[:-1]
    assert np.allclose(experiment.tracking_rmse(rec), np.sqrt(np.mean(e**2, axis=0)))
    assert experiment.tracking_variance(rec) == pytest.approx(np.mean(np.var(e, axis=0)))


def test_identical_records_compare_equal(tmp_path):
    a, b = _record(0.2, seed=1), _record(0.2, seed=1)
    rep = experiment.compare({"a": a, "b": b}, tmp_path, tmp_path)
    assert rep["a"]["rmse_cm"] == rep["b"]["rmse_cm"]
    assert rep["a"]["violations"] == {"input": 0, "level": 0}
    assert (tmp_path / "compare.csv").read_text().splitlines()[0].startswith("controller,rmse_h1_cm")


def test_violations_counted():
    rec = _record()
    rec.u[3, 0] = 15.5
    rec.y[4, 2] = -0.1
    assert experiment.violations(rec) == {"input": 1, "level": 1}


def test_compare_matches_recomputation_from_csv(tmp_path):
    rec = _record(0.3, seed=4)
    path = rec.to_csv(tmp_path / "loop.csv")
    back = imc.LoopRecord.from_csv(path)
    rep = experiment.compare({"x": back})
    e = back.y[1:] - back.r[:-1]
    assert np.allclose(rep["x"]["rmse_cm"], np.sqrt(np.mean(e**2, axis=0)), rtol=1e-12)


def test_quick_pipeline_writes_every_artifact(quick_run):
    out, manifest = quick_run
    for rel in ("report.md", "config.json", "tables/compare.md", "tables/table2_fit.csv",
                "tables/noise_variance.csv", "figures/closed_loop.png",
                "figures/validation_loss.png", "models/diss-ca-nnarx.json",
                "certificates/nnarx.json", "loops/mpc-certified.csv"):
        assert rel in manifest["files"], rel
    assert (out / "timing" / "latency.md").exists()
    assert not any(k.startswith("timing/") for k in manifest["files"])
    assert experiment.build_manifest(out) == manifest


def test_quick_pipeline_is_bit_reproducible(quick_run, tmp_path):
    _, first = quick_run
    second = experiment.reproduce_all(experiment.ExperimentConfig.quick(), tmp_path)
    assert second["digest"] == first["digest"]


def test_stage_errors_name_the_stage(tmp_path):
    cfg = experiment.ExperimentConfig.quick()
    cfg.train["epochs"] = 1
    cfg.data.T_sub = 10_000
    with pytest.raises(experiment.StageError) as info:
        experiment.reproduce_all(cfg, tmp_path)
    assert info.value.stage == "gen-data"


# ---------------------------------------------------------------- command line


def test_cli_validation_errors_exit_2(tmp_path, capsys):
    assert cli.main(["certify", "--model", str(tmp_path / "missing.json"), "--out", str(tmp_path / "c")]) == 2
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"nonsense": True}))
    assert cli.main(["reproduce-all", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_run_imc_refuses_model_with_vanishing_gain(tmp_path):
    p = init_cannarx(H=5, seed=0)
    p.g_layers[-1].W = np.zeros_like(p.g_layers[-1].W)
    p.g_layers[-1].b = np.zeros(2)
    path = save_model(p, tmp_path / "m.json")
    code = cli.main(["run-imc", "--model", str(path), "--out", str(tmp_path / "r.csv"),
                     "--duration", "5", "--starts", "4", "--screen", "100"])
    assert code == 2
    assert not (tmp_path / "r.csv").exists()


def test_cli_certify_and_loops_on_quick_models(quick_run, tmp_path, capsys):
    out, _ = quick_run
    model = str(out / "models" / "diss-ca-nnarx.json")
    assert cli.main(["certify", "--model", model, "--out", str(tmp_path / "c.json"),
                     "--probe-samples", "200", "--starts", "4", "--screen", "1000"]) == 0
    assert json.loads((tmp_path / "c.json").read_text())["verdict"] == "certified"
    assert cli.main(["run-imc", "--model", model, "--out", str(tmp_path / "imc.csv"), "--quick",
                     "--duration", "20", "--starts", "4", "--screen", "1000"]) == 0
    assert cli.main(["run-mpc", "--model", model, "--out", str(tmp_path / "mpc.csv"), "--quick",
                     "--duration", "5", "--max-iter", "5"]) == 0
    assert cli.main(["compare", f"imc={tmp_path / 'imc.csv'}", f"mpc={tmp_path / 'mpc.csv'}",
                     "--out", str(tmp_path / "cmp")]) == 0
    assert (tmp_path / "cmp" / "compare.md").exists()
    assert "rmse" in capsys.readouterr().out.lower()
