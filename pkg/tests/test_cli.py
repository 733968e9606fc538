import csv
import json

import numpy as np
import pytest

from covlearn import cli, synth
from covlearn.cli import main


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Small D1-style dataset, a fast config and one report per method."""
    d = tmp_path_factory.mktemp("cli")
    spec = write_json(d / "spec.json", {"schema": "covlearn.dataset-spec/1", "dataset_id": "D1",
                                        "length": 20, "n_train": 2, "n_test": 2, "seed": 3})
    cfg = write_json(d / "cfg.json", {"schema": "covlearn.config/1",
                                      "train": {"max_outer_iterations": 4},
                                      "baseline": {"max_evals": 25}})
    assert main(["generate", "--dataset", spec, "--out", str(d / "ds.json")]) == 0
    for method in ("ours", "nelder-mead", "powell"):
        assert main(["train", "--dataset", str(d / "ds.json"), "--method", method, "--config", cfg,
                     "--out", str(d / f"{method}.json")]) == 0
    return d


def test_generate_preset_counts_and_checksum(tmp_path, capsys):
    out = tmp_path / "d1.json"
    assert main(["generate", "--dataset", "D1", "--seed", "5", "--out", str(out)]) == 0
    first = capsys.readouterr().out
    ds = synth.Dataset.load(out)
    assert len(ds.train) == 5 and len(ds.test) == 20
    assert main(["generate", "--dataset", "D1", "--seed", "5", "--out", str(out)]) == 0
    assert capsys.readouterr().out == first
    assert f"sha256={cli.sha256_file(out)}" in first


def test_generate_rejects_negative_theta(tmp_path, capsys):
    spec = write_json(tmp_path / "bad.json", {"dataset_id": "D1", "latent": {
        "gps": [-1, 1, 1], "odom": [1, 1, 1]}})
    assert main(["generate", "--dataset", spec, "--out", str(tmp_path / "x.json")]) == cli.EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_train_report_contents(workdir):
    doc = json.loads((workdir / "ours.json").read_text())
    assert doc["schema"] == cli.REPORT_SCHEMA and doc["method"] == "ours"
    assert doc["init_id"] == "far" and doc["status"] in ("max_iterations", "converged")
    assert doc["spread_rounded"] == round(doc["spread"]) and doc["spread"] <= 100 + 1e-9
    cols = doc["columns"]
    theta_idx = [i for i, c in enumerate(cols) if c.startswith("theta[")]
    assert len(theta_idx) == 6 and len(doc["rows"]) == 4
    for row in doc["rows"]:
        vals = np.array([row[i] for i in theta_idx])
        assert np.all(vals >= 0.1) and np.all(vals <= 10)
    assert doc["dataset"]["sha256"] == cli.sha256_file(workdir / "ds.json")


@pytest.mark.parametrize("method", ["nelder-mead", "powell"])
def test_baseline_reports_are_tagged(workdir, method):
    doc = json.loads((workdir / f"{method}.json").read_text())
    assert doc["method"] == method and doc["rows"]


def test_train_is_deterministic_and_thread_independent(workdir, tmp_path, monkeypatch):
    args = ["train", "--dataset", str(workdir / "ds.json"), "--config", str(workdir / "cfg.json")]
    assert main(args + ["--threads", "2", "--out", str(tmp_path / "a.json")]) == 0
    monkeypatch.setenv("COVLEARN_THREADS", "3")
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    ref = cli.strip_timestamps(json.loads((workdir / "ours.json").read_text()))
    for name in ("a.json", "b.json"):
        assert cli.strip_timestamps(json.loads((tmp_path / name).read_text())) == ref


def test_env_var_overrides_threads_flag(monkeypatch):
    args = cli.build_parser().parse_args(["train", "--dataset", "x", "--threads", "2"])
    assert cli._threads(args) == 2
    monkeypatch.setenv("COVLEARN_THREADS", "5")
    assert cli._threads(args) == 5
    monkeypatch.setenv("COVLEARN_THREADS", "zero")
    with pytest.raises(cli.ConfigError):
        cli._threads(args)


def test_train_error_exit_codes(workdir, tmp_path):
    ds = str(workdir / "ds.json")
    assert main(["train", "--dataset", str(tmp_path / "missing.json")]) == cli.EXIT_DATA
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["train", "--dataset", str(tmp_path / "junk.json")]) == cli.EXIT_DATA
    bad_cfg = write_json(tmp_path / "cfg.json", {"train": {"learning_rate": 1}})
    assert main(["train", "--dataset", ds, "--config", bad_cfg]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["train", "--dataset", ds, "--method", "adam"])
    assert exc.value.code == cli.EXIT_CONFIG
    outside = write_json(tmp_path / "t.json", {"theta": {"gps": [50, 1, 1], "odom": [1, 1, 1]}})
    assert main(["train", "--dataset", ds, "--init", outside]) == cli.EXIT_CONFIG


def test_aborted_training_exits_with_convergence_code(workdir, tmp_path, monkeypatch):
    from covlearn import learner
    from covlearn.solver import ConvergenceError

    def boom(*a, **k):
        raise ConvergenceError("forced")
    monkeypatch.setattr(learner, "solution_jacobian", boom)
    out = tmp_path / "r.json"
    code = main(["train", "--dataset", str(workdir / "ds.json"), "--out", str(out)])
    assert code == cli.EXIT_CONVERGENCE
    assert json.loads(out.read_text())["status"] == "aborted"


def test_bounds_modes(workdir, tmp_path):
    ds = synth.Dataset.load(workdir / "ds.json")
    classes = ds.spec.latent_theta.classes
    assert cli.resolve_bounds("loose", classes).vectors(classes)[0][0] == 1e-6
    path = write_json(tmp_path / "b.json", {"schema": "covlearn.bounds/1",
                                            "lower": {c: [0.5] * 3 for c in classes},
                                            "upper": {c: [2.0] * 3 for c in classes}})
    b = cli.resolve_bounds(path, classes)
    assert b.vectors(classes)[1].tolist() == [2.0] * 6
    wrong = write_json(tmp_path / "w.json", {"lower": {"gps": [0.5] * 3}, "upper": {"gps": [2.0] * 3}})
    with pytest.raises(cli.ConfigError):
        cli.resolve_bounds(wrong, classes)


def test_eval_table_with_initial_column(workdir, tmp_path, capsys):
    out = tmp_path / "eval.json"
    assert main(["eval", "--dataset", str(workdir / "ds.json"), "--theta", str(workdir / "ours.json"),
                 str(workdir / "powell.json"), "--out", str(out)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["dataset", "Initial", "Initial", "ours", "ours", "powell", "powell"]
    assert table[2].split()[0] == "D1"
    doc = json.loads(out.read_text())
    assert doc["columns"] == ["Initial", "ours", "powell"]
    report = json.loads((workdir / "ours.json").read_text())
    far = cli.load_theta_dict(report["theta0"], report["classes"])
    ref = cli.evaluate_dataset(far, synth.Dataset.load(workdir / "ds.json").test)
    assert doc["results"]["Initial"]["transl"] == ref.transl


def test_eval_rejects_wrong_class_names(workdir, tmp_path):
    theta = write_json(tmp_path / "t.json", {"schema": "covlearn.theta/1",
                                             "theta": {"gnss": [1, 1, 1], "odom": [1, 1, 1]}})
    assert main(["eval", "--dataset", str(workdir / "ds.json"), "--theta", theta]) == cli.EXIT_CONFIG
    assert main(["eval", "--dataset", str(workdir / "ds.json")]) == cli.EXIT_CONFIG


def test_eval_noise_free_dataset_scores_zero(tmp_path, capsys):
    from conftest import noise_free
    ds = synth.make_dataset(synth.DatasetSpec.preset("D3", length=15, n_train=1, n_test=2))
    ds.test = [noise_free(t) for t in ds.test]
    ds.save(tmp_path / "clean.json")
    out = tmp_path / "e.json"
    assert main(["eval", "--dataset", str(tmp_path / "clean.json"), "--initial", "far",
                 "--out", str(out)]) == 0
    res = json.loads(out.read_text())["results"]["Initial"]
    assert res["transl"] < 1e-9 and res["rot"] < 1e-9


def test_curves_merge_reports(workdir, tmp_path):
    out = tmp_path / "curves.csv"
    reports = [str(workdir / f"{m}.json") for m in ("ours", "nelder-mead", "powell")]
    assert main(["curves", *reports, "--out", str(out)]) == 0
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == tuple(cli.CURVE_COLUMNS)
    assert {r["method"] for r in rows} == {"ours", "nelder-mead", "powell"}
    for m in ("ours", "nelder-mead", "powell"):
        times = [float(r["wall_seconds"]) for r in rows if r["method"] == m]
        assert times == sorted(times)
        assert all(r["init_id"] == "far" and r["dataset"] == "D1" for r in rows if r["method"] == m)


def test_curves_errors(workdir, tmp_path):
    assert main(["curves", "--out", str(tmp_path / "c.csv")]) == cli.EXIT_CONFIG
    assert main(["curves", str(workdir / "ds.json"), "--out", str(tmp_path / "c.csv")]) == cli.EXIT_DATA
