import json

import numpy as np
import pytest
from click.testing import CliRunner

from cobalt import pipeline
from cobalt.cli import main
from cobalt.pipeline import ArtifactError, ConfigError, RunLayout, TrainConfig

SMALL = {
    "dataset": {"n_train": 300, "n_val": 150, "n_test": 200, "image_size": 16, "patch_size": 4, "correlation": 0.95},
    "stage1": {"epochs": 2, "dim": 8, "hidden": 16, "proj_hidden": 16},
    "stage2": {"epochs": 3, "hidden": 16, "silhouette_points": 150},
}


def small_config(seed: int = 0, **top) -> TrainConfig:
    return TrainConfig.from_dict({**SMALL, **top}).with_seed(seed)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    pipeline.run_pipeline(small_config(1), out, plots=True)
    return out


# configuration


def test_config_round_trip_and_defaults(tmp_path):
    cfg = TrainConfig().validate()
    assert cfg.stage1.n_slots == 4 and cfg.stage1.n_codes == 8
    assert (cfg.stage1.tau_s, cfg.stage1.tau_t, cfg.stage1.alpha_c, cfg.stage1.alpha_t) == (0.1, 0.07, 0.9, 0.99)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(small_config(3).to_dict()))
    back = TrainConfig.load(path)
    assert back.to_dict() == small_config(3).to_dict()
    assert back.seed == 3 and back.dataset.seed == 3


@pytest.mark.parametrize("doc", [
    {"stage1": {"tau_t": 0}},
    {"stage1": {"alpha_c": 1.2}},
    {"stage1": {"n_slots": 2.5}},
    {"stage2": {"lam": -1}},
    {"early_stop": "best"},
    {"seed": -1},
    {"extra": 1},
    {"stage1": {"nope": 1}},
    {"stage1": {"optimizer": "lbfgs"}},
    {"stage1": {"contrast_negatives": "none"}},
    {"dataset": {"n_colors": 2}},
    [],
])
def test_invalid_configs_raise_config_error(doc):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(doc)


def test_load_reports_unreadable_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        TrainConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        TrainConfig.load(tmp_path / "bad.json")


# end to end


def test_run_layout_is_complete(run_dir):
    layout = RunLayout(run_dir)
    for path in [layout.data / "dataset.cblt", layout.stage1 / "teacher.cbsn", layout.stage1 / "student.cbsn",
                 layout.stage1 / "codebook.json", layout.stage1 / "metrics.ndjson", layout.assign / "train.ndjson",
                 layout.assign / "val.ndjson", layout.balance / "cluster_table.json", layout.report / "summary.json",
                 layout.report / "losses.png", layout.report / "group_accuracy.png", layout.report / "codebook_usage.png"]:
        assert path.exists(), path
    for sampler in ("cobalt", "iid"):
        d = layout.run_dir(sampler, "avg")
        for name in ("classifier.cbsn", "metrics.ndjson", "predictions.ndjson", "eval.json", "run.json"):
            assert (d / name).exists()


def test_metrics_rows_have_the_documented_fields(run_dir):
    layout = RunLayout(run_dir)
    s1 = pipeline.read_ndjson(layout.stage1 / "metrics.ndjson")
    assert [r["epoch"] for r in s1] == [1, 2]
    assert {"L_dis", "L_con", "L_vq", "codes_in_use"} <= set(s1[0])
    s2 = pipeline.read_ndjson(layout.run_dir("cobalt", "avg") / "metrics.ndjson")
    assert len(s2) == 3 and sum(r["selected"] for r in s2) == 1
    for r in s2:
        assert 0 <= r["val_avg"] <= 1 and 0 <= r["val_worst_hg"] <= 1
        assert r["val_worst_ig"] is None or 0 <= r["val_worst_ig"] <= 1
    table = json.loads((layout.balance / "cluster_table.json").read_text())
    assert table["lambda"] in (1, 2)
    for cluster in table["clusters"]:
        assert abs(sum(cluster["probs"].values()) - 1) <= 1e-12


def test_summary_matches_recomputation_from_predictions(run_dir):
    layout = RunLayout(run_dir)
    summary = json.loads((layout.report / "summary.json").read_text())
    assert {r["sampler"] for r in summary["runs"]} == {"cobalt", "iid"}
    assert [d["early_stop"] for d in summary["deltas"]] == ["avg"]
    for row in summary["runs"]:
        preds = pipeline.read_ndjson(layout.runs / row["run"] / "predictions.ndjson")
        assert row["test_average"] == np.mean([p["y"] == p["pred"] for p in preds])
        groups = {}
        for p in preds:
            groups.setdefault(p["group"], []).append(p["y"] == p["pred"])
        worst = min(np.mean(v) for v in groups.values() if len(v) >= 10)
        assert row["test_worst"] == pytest.approx(worst, abs=1e-15)
    deltas = summary["deltas"][0]
    by = {r["sampler"]: r for r in summary["runs"]}
    assert deltas["worst_delta"] == pytest.approx(by["cobalt"]["test_worst"] - by["iid"]["test_worst"])


def test_erm_only_report_has_no_delta(run_dir, tmp_path):
    out = tmp_path / "erm"
    pipeline.run_pipeline(small_config(1), out, samplers=("iid",), plots=False)
    summary = pipeline.report(RunLayout(out), plots=False)
    assert [r["sampler"] for r in summary["runs"]] == ["iid"] and summary["deltas"] == []


def test_same_seed_gives_byte_identical_metrics(run_dir, tmp_path):
    pipeline.run_pipeline(small_config(1), tmp_path, plots=False)
    for rel in ["stage1/metrics.ndjson", "runs/cobalt_avg/metrics.ndjson", "runs/iid_avg/metrics.ndjson",
                "assign/train.ndjson", "balance/cluster_table.json", "runs/cobalt_avg/predictions.ndjson"]:
        assert (run_dir / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel


def test_reloaded_stage1_reproduces_assignments(run_dir):
    layout = RunLayout(run_dir)
    cfg = small_config(1)
    data = pipeline.load_data(cfg, layout)
    model = pipeline.load_stage1(cfg, layout, 4)
    va = data.split("val")
    assert model.assign(va.images, va.y, va.sample_id) == pipeline.read_assignments(layout, "val")


def test_iid_never_touches_the_cluster_table(run_dir, tmp_path):
    cfg = small_config(1)
    layout = RunLayout(tmp_path)
    data = pipeline.load_data(cfg, RunLayout(run_dir))
    clf = pipeline.train_stage2(cfg, data, layout, "iid", "hg")
    assert not layout.balance.exists() and clf.best_epoch_ >= 1
    with pytest.raises(ArtifactError):
        pipeline.train_stage2(cfg, data, layout, "cobalt", "avg")
    with pytest.raises(ArtifactError):
        pipeline.train_stage2(cfg, data, layout, "iid", "ig")


def test_evaluate_examples(run_dir):
    cfg = small_config(1)
    layout = RunLayout(run_dir)
    test = pipeline.load_data(cfg, layout).split("test")
    clf = pipeline.load_classifier(layout.run_dir("iid", "avg"))

    class Oracle:
        def __init__(self, pred):
            self.pred = pred

        def predict(self, X):
            return self.pred

    perfect = pipeline.evaluate(Oracle(test.y), test)
    assert perfect["average"] == 1.0 and perfect["worst"] == 1.0
    const = pipeline.evaluate(Oracle(np.zeros_like(test.y)), test)
    assert const["worst"] == 0.0
    result = pipeline.evaluate(clf, test, min_group_size=1)
    weighted = sum(g["n"] * g["acc"] for g in result["groups"].values()) / len(test)
    assert result["average"] == pytest.approx(weighted, abs=1e-12)
    with pytest.raises(ValueError, match="records"):
        pipeline.evaluate(clf, test, "inferred")
    inferred = pipeline.evaluate(clf, test, "inferred", pipeline.read_assignments(layout, "test"), min_group_size=1)
    assert all("-" in k for k in inferred["groups"])


def test_hg_checkpoint_dominates_avg_on_worst_group_validation(run_dir, tmp_path):
    cfg = small_config(1)
    layout = RunLayout(tmp_path)
    for sub in ("data", "stage1", "assign", "balance"):
        (tmp_path / sub).symlink_to(run_dir / sub)
    data = pipeline.load_data(cfg, layout)
    picks = {}
    for stop in ("hg", "avg"):
        pipeline.train_stage2(cfg, data, layout, "cobalt", stop)
        rows = pipeline.read_ndjson(layout.run_dir("cobalt", stop) / "metrics.ndjson")
        picks[stop] = next(r for r in rows if r["selected"])
    assert picks["hg"]["val_worst_hg"] >= picks["avg"]["val_worst_hg"]


def test_report_rejects_corrupt_metrics(run_dir, tmp_path):
    import shutil

    shutil.copytree(run_dir, tmp_path / "copy")
    layout = RunLayout(tmp_path / "copy")
    metrics = layout.run_dir("iid", "avg") / "metrics.ndjson"
    metrics.write_text(metrics.read_text() + "not json\n")
    with pytest.raises(ArtifactError, match=r"metrics.ndjson:4"):
        pipeline.report(layout, plots=False)
    with pytest.raises(ArtifactError):
        pipeline.report(RunLayout(tmp_path / "empty"), plots=False)


# command line


def test_cli_steps_and_exit_codes(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    runner = CliRunner()
    base = ["--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "r")]
    for step in (["gen"], ["discover"], ["assign"], ["balance"], ["train", "--sampler", "iid", "--early-stop", "hg"],
                 ["train", "--sampler", "cobalt", "--early-stop", "ig"], ["eval"], ["report", "--no-plots"]):
        result = runner.invoke(main, base + step)
        assert result.exit_code == 0, (step, result.output)
    assert "cobalt_ig" in result.output and "iid_hg" in result.output

    assert runner.invoke(main, ["--out", str(tmp_path / "none"), "discover"]).exit_code == 4
    assert runner.invoke(main, ["--config", str(cfg), "--out", str(tmp_path / "none"), "report"]).exit_code == 4
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stage1": {"tau_s": -1}}))
    res = runner.invoke(main, ["--config", str(bad), "gen"])
    assert res.exit_code == 2 and "tau_s" in res.output
    assert runner.invoke(main, ["--config", str(tmp_path / "missing.json"), "gen"]).exit_code == 2
    assert runner.invoke(main, ["--seed", "-3", "gen"]).exit_code == 2


def test_cli_collapse_exit_code(tmp_path):
    doc = json.loads(json.dumps(SMALL))
    doc["stage1"].update(alpha_t=0.0, tau_t=10.0, epochs=6, optimizer="sgd", lr=0.001, weight_decay=1e-4)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    result = CliRunner().invoke(main, ["--config", str(cfg), "--out", str(tmp_path / "r"), "run"])
    assert result.exit_code == 3, result.output
    assert "collapse" in result.output
    rows = pipeline.read_ndjson(tmp_path / "r" / "stage1" / "metrics.ndjson")
    assert [r["codes_in_use"] for r in rows][-3:] == [1, 1, 1]
