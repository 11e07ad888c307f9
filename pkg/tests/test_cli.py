import csv
import json

import pytest

from transferscale.cli import derive_seed, main, parse_holdout, replay
from transferscale.powerlaw import AbsoluteUS, TopQuantile

HEADER = "experiment_id,arch_family,upstream_task,downstream_task,shots,upstream_accuracy,downstream_accuracy"
TRUTH = {"k": 0.6, "alpha": 1.5, "e_ir": 0.15}

SMALL_TOY = {
    "task": {"n_upstream": 200, "n_upstream_test": 100, "n_downstream_pool": 12, "n_downstream_eval": 12},
    "model": {"hidden_dims": [8, 8], "init_scale": 1.0},
    "train": {"epochs": 2},
    "shots": [5],
    "ds_tasks": ["aligned", "lowlevel"],
}


def write(path, text):
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def simulate(tmp_path, name="sim", seed=0, **cfg):
    config = {**TRUTH, "n_points": 60, "us_range": [0.05, 0.5], **cfg}
    cfg_path = write(tmp_path / f"{name}.json", json.dumps(config))
    out = tmp_path / name
    assert main(["simulate", cfg_path, "--out", str(out), "--seed", str(seed)]) == 0
    return out


def test_derive_seed_and_holdout_parsing():
    assert derive_seed(0, "a") == derive_seed(0, "a") != derive_seed(0, "b")
    assert 0 <= derive_seed(5, "x") < 2 ** 64
    assert parse_holdout("0.45:0.50") == AbsoluteUS(0.45, 0.5)
    assert parse_holdout("top:0.1") == TopQuantile(0.1)
    assert parse_holdout("none") == TopQuantile(0.0)
    with pytest.raises(ValueError):
        parse_holdout("bogus")


def test_ingest_reports_count(tmp_path, capsys):
    rows = "\n".join(f"e{i},vit,jft,imagenet,25,0.{i + 3},0.{i + 4}" for i in range(3))
    path = write(tmp_path / "r.csv", HEADER + "\n" + rows + "\n")
    assert main(["ingest", path, "--out", str(tmp_path / "o")]) == 0
    assert "3 records" in capsys.readouterr().out
    assert read_csv(tmp_path / "o" / "summary.csv") == [
        {"upstream_task": "jft", "downstream_task": "imagenet", "shots": "25", "count": "3"}]


def test_ingest_missing_column_fails_naming_it(tmp_path, capsys):
    path = write(tmp_path / "r.csv", HEADER.rsplit(",", 1)[0] + "\ne1,vit,jft,imagenet,25,0.4\n")
    assert main(["ingest", path, "--out", str(tmp_path / "o")]) != 0
    assert "downstream_accuracy" in capsys.readouterr().err


def test_missing_file_fails(tmp_path, capsys):
    assert main(["ingest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_ingest_csv_and_jsonl_identical(tmp_path):
    recs = [dict(experiment_id=f"e{i}", arch_family="vit", upstream_task="jft", downstream_task="c", shots=5,
                 upstream_accuracy=0.1 * (i + 1), downstream_accuracy=0.05 * (i + 1)) for i in range(4)]
    jsonl = write(tmp_path / "r.jsonl", "".join(json.dumps(r) + "\n" for r in recs))
    csv_path = write(tmp_path / "r.csv", HEADER + "\n" + "".join(
        ",".join(str(r[k]) for k in HEADER.split(",")) + "\n" for r in recs))
    assert main(["ingest", jsonl, "--out", str(tmp_path / "a")]) == 0
    assert main(["ingest", csv_path, "--out", str(tmp_path / "b")]) == 0
    for name in ("records.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_then_fit_recovers_truth(tmp_path):
    sim = simulate(tmp_path)
    out = tmp_path / "fit"
    assert main(["fit", str(sim / "records.csv"), "--out", str(out), "--target", "all", "--holdout", "none"]) == 0
    fit = json.loads((out / "fit.json").read_text())
    for key, value in TRUTH.items():
        assert fit[key] == pytest.approx(value, rel=1e-3)
    assert len(read_csv(out / "curve.csv")) == 101


def test_fit_hull_contains_dominant_point(tmp_path):
    rows = [f"e{i},vit,jft,c,10,{0.05 + 0.01 * i},{0.1 + 0.005 * i}" for i in range(40)]
    rows.append("star,vit,jft,c,10,0.3,0.9")
    path = write(tmp_path / "r.csv", HEADER + "\n" + "\n".join(rows) + "\n")
    out = tmp_path / "fit"
    assert main(["fit", path, "--out", str(out), "--target", "all", "--holdout", "0.45:0.50"]) == 0
    assert "star" in [r["source_id"] for r in read_csv(out / "hull.csv")]
    assert json.loads((out / "diagnostics.json").read_text())["diagnostics"]["n_holdout"] == 0


def test_fit_scaled_columns(tmp_path):
    sim = simulate(tmp_path)
    out = tmp_path / "fit"
    assert main(["fit", str(sim / "records.csv"), "--out", str(out), "--scale", "logit"]) == 0
    row = read_csv(out / "curve.csv")[0]
    assert set(row) >= {"scaled_us", "scaled_predicted_ds"}


def test_sensitivity_full_size_matches_fit_and_reruns_identically(tmp_path):
    sim = simulate(tmp_path, noise={"kind": "one_sided_below", "scale": 0.05})
    records = str(sim / "records.csv")
    assert main(["fit", records, "--out", str(tmp_path / "fit")]) == 0
    for name in ("s1", "s2"):
        assert main(["sensitivity", records, "--out", str(tmp_path / name), "--sizes", "60", "--trials", "1",
                     "--seed", "3"]) == 0
    assert (tmp_path / "s1" / "sensitivity.csv").read_bytes() == (tmp_path / "s2" / "sensitivity.csv").read_bytes()
    [row] = read_csv(tmp_path / "s1" / "sensitivity.csv")
    diag = json.loads((tmp_path / "fit" / "diagnostics.json").read_text())
    assert float(row["mean_fitting_error"]) == pytest.approx(diag["diagnostics"]["fitting_error"], rel=1e-9)
    assert float(row["mean_prediction_error"]) == pytest.approx(diag["diagnostics"]["prediction_error"], rel=1e-9)


def test_correlate_identical_columns(tmp_path):
    lines = []
    for m, (us, a) in enumerate([(0.1, 0.5), (0.2, 0.1), (0.3, 0.3), (0.4, 0.2)]):
        for task in ("a", "b"):
            lines.append(f"{task}{m},vit,jft,{task},10,{us},{a},m{m}")
    path = write(tmp_path / "r.csv", HEADER + ",hp_model_id\n" + "\n".join(lines) + "\n")
    out = tmp_path / "corr"
    assert main(["correlate", path, "--upstream", "jft", "--shots", "10", "--out", str(out)]) == 0
    rows = {r["task"]: r for r in read_csv(out / "correlation.csv")}
    assert float(rows["a"]["b"]) == pytest.approx(1.0)
    assert float(rows["jft"]["jft"]) == 1.0


def toy_config(tmp_path):
    return write(tmp_path / "toy.json", json.dumps(SMALL_TOY))


def test_toylab_sweep_rows_per_grid_value(tmp_path):
    out = tmp_path / "sweep"
    assert main(["toylab", "sweep", "--config", toy_config(tmp_path), "--grid", "0,0.5", "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert sorted({float(r["grid_value"]) for r in rows}) == [0.0, 0.5]
    assert len(rows) == 2 * 2  # grid values x DS tasks (one shot count)


def test_toylab_unknown_config_key(tmp_path, capsys):
    cfg = write(tmp_path / "bad.json", json.dumps({"train": {"learning_rate": 1}}))
    assert main(["toylab", "train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def all_command_runs(tmp_path):
    sim = simulate(tmp_path, noise={"kind": "symmetric", "sigma": 0.02})
    records = str(sim / "records.csv")
    toy = toy_config(tmp_path)
    runs = {
        "simulate": None,
        "ingest": ["ingest", records],
        "fit": ["fit", records, "--holdout", "top:0.1"],
        "sensitivity": ["sensitivity", records, "--sizes", "20,40", "--trials", "2"],
        "correlate": ["correlate", records, "--upstream", "jft"],
        "train": ["toylab", "train", "--config", toy],
    }
    dirs = {"simulate": sim}
    for name, argv in runs.items():
        if argv is None:
            continue
        dirs[name] = tmp_path / name
        assert main(argv + ["--out", str(dirs[name]), "--seed", "4"]) == 0
    dirs["probe"] = tmp_path / "probe"
    assert main(["toylab", "probe", "--config", toy, "--model", str(dirs["train"] / "model.bin"),
                 "--out", str(dirs["probe"])]) == 0
    dirs["sweep"] = tmp_path / "sweep"
    assert main(["toylab", "sweep", "--config", toy, "--grid", "0.1", "--out", str(dirs["sweep"])]) == 0
    return dirs


def test_replay_every_command(tmp_path, capsys):
    for name, d in all_command_runs(tmp_path).items():
        assert replay(str(d / "manifest.json"), str(tmp_path / f"replay-{name}")) == 0, name
        for f in json.loads((d / "manifest.json").read_text())["outputs"]:
            assert (d / f).read_bytes() == (tmp_path / f"replay-{name}" / f).read_bytes()
    assert "replay ok" in capsys.readouterr().out


def test_manifest_contents(tmp_path):
    sim = simulate(tmp_path, seed=9)
    manifest = json.loads((sim / "manifest.json").read_text())
    assert set(manifest) == {"command", "options", "inputs", "seed", "version", "outputs"}
    assert manifest["command"] == "simulate" and manifest["seed"] == 9
    assert list(manifest["outputs"]) == ["records.csv"]
    assert all(len(d) == 64 for d in manifest["inputs"].values())
    again = simulate(tmp_path, name="sim", seed=9)
    assert (again / "manifest.json").read_bytes() == (sim / "manifest.json").read_bytes()


def test_replay_detects_changed_input(tmp_path, capsys):
    sim = simulate(tmp_path)
    out = tmp_path / "ing"
    assert main(["ingest", str(sim / "records.csv"), "--out", str(out)]) == 0
    (sim / "records.csv").write_text((sim / "records.csv").read_text() + "\n")
    assert main(["replay", str(out / "manifest.json")]) == 1
    assert "changed" in capsys.readouterr().err
