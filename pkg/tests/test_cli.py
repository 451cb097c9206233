import io
import json

import pandas as pd
import pytest

import app.commands.synth
import app.main
from app.config import settings
from app.errors import ConfigError
from app.main import main
from app.services.dataset import read_dataset
from app.services.params import dump_hyperparams

from helpers import linear_hyperparams, small_synth_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "synth.json"
    config.write_text(small_synth_config(noise_scale=0.05).model_dump_json(), encoding="utf-8")
    hp = root / "linear.hyperparams"
    hp.write_text(dump_hyperparams(linear_hyperparams(epochs=3)), encoding="utf-8")
    grid = root / "grid.txt"
    grid.write_text("layers = 0\nlearning_rate = 1e-3, 2e-3\nepochs = 3\nbatch_size = 1000\n", encoding="utf-8")
    assert main(["synth", "--config", str(config), "--out", str(root / "runs")]) == 0
    return root


def test_synth_writes_manifest(workspace):
    manifest = json.loads((workspace / "runs" / "manifest.json").read_text())
    assert [w["wafer_id"] for w in manifest["wafers"]] == [f"R{n}" for n in range(21, 27)]
    assert manifest["holdout"] == ["R26"]


def test_featurize_to_file_and_stdout(workspace, capsys):
    out = workspace / "features.csv"
    assert main(["featurize", "--manifest", str(workspace / "runs" / "manifest.json"), "--out", str(out)]) == 0
    df = pd.read_csv(out)
    assert df["wafer_id"].tolist() == [f"R{n}" for n in range(21, 27)]
    assert df.shape[1] == 1 + 2 * 2 * 12
    assert (workspace / "features.layout.csv").is_file()

    capsys.readouterr()
    assert main(["featurize", "--manifest", str(workspace / "runs" / "manifest.json")]) == 0
    assert capsys.readouterr().out == out.read_text()


def test_cv_report_and_curves(workspace):
    manifest = str(workspace / "runs" / "manifest.json")
    args = ["cv", "--manifest", manifest, "--hyperparams", str(workspace / "linear.hyperparams"), "--format", "csv"]
    assert main(args + ["--out", str(workspace / "cv1.csv"), "--curves-dir", str(workspace / "curves")]) == 0
    assert main(args + ["--out", str(workspace / "cv2.csv")]) == 0
    text = (workspace / "cv1.csv").read_text()
    assert text == (workspace / "cv2.csv").read_text()
    df = pd.read_csv(io.StringIO(text))
    assert len(df) == 5 + 1
    assert df["Fold"].iloc[-1] == "Mean"
    assert len(list((workspace / "curves").glob("fold_*.csv"))) == 5


def test_search_train_predict_holdout(workspace):
    manifest = str(workspace / "runs" / "manifest.json")
    cache = f"sqlite:///{workspace / 'results.db'}"
    best = workspace / "best.hyperparams"
    search = [
        "search", "--manifest", manifest, "--grid", str(workspace / "grid.txt"),
        "--cache", cache, "--best-out", str(best), "--format", "csv",
    ]
    assert main(search + ["--out", str(workspace / "rank1.csv")]) == 0
    assert main(search + ["--out", str(workspace / "rank2.csv")]) == 0
    assert (workspace / "rank1.csv").read_text() == (workspace / "rank2.csv").read_text()
    ranking = pd.read_csv(workspace / "rank1.csv")
    assert ranking["Rank"].tolist() == [1, 2]

    model = workspace / "model.txt"
    assert main(["train", "--manifest", manifest, "--hyperparams", str(best), "--out", str(model)]) == 0
    assert model.read_text().startswith("ETCHVM-MODEL v1")

    features = workspace / "features_for_predict.csv"
    assert main(["featurize", "--manifest", manifest, "--out", str(features)]) == 0
    preds = workspace / "preds.csv"
    assert main(["predict", "--model", str(model), "--features", str(features), "--out", str(preds)]) == 0
    df = pd.read_csv(preds)
    assert list(df.columns) == ["wafer_id", "prediction"]
    assert len(df) == 6

    holdout = workspace / "holdout.csv"
    assert main(["holdout", "--model", str(model), "--manifest", manifest, "--format", "csv", "--out", str(holdout)]) == 0
    table = pd.read_csv(holdout)
    assert table["Wafer"].tolist() == ["R26"]
    assert table["Variable"].tolist() == ["recess"]


def test_train_best_fold(workspace):
    manifest = str(workspace / "runs" / "manifest.json")
    model = workspace / "best_fold.txt"
    args = ["train", "--manifest", manifest, "--hyperparams", str(workspace / "linear.hyperparams")]
    assert main(args + ["--refit", "best-fold", "--out", str(model)]) == 0
    assert model.is_file()


def test_missing_config_file_is_usage_error(workspace):
    code = main(["cv", "--manifest", str(workspace / "nope.json"), "--hyperparams", str(workspace / "linear.hyperparams")])
    assert code == 2
    assert main(["no-such-command"]) == 2


def test_zero_budget_is_rejected(workspace):
    manifest = str(workspace / "runs" / "manifest.json")
    code = main(["search", "--manifest", manifest, "--grid", str(workspace / "grid.txt"), "--budget", "0", "--cache", ""])
    assert code == 1


def test_missing_step_fails_with_exit_one(workspace, tmp_path, capsys):
    runs = workspace / "runs"
    cfg = json.loads((runs / "featurize.json").read_text())
    cfg["step_ids"] = cfg["step_ids"] + ["S9"]
    (runs / "featurize_bad.json").write_text(json.dumps(cfg))
    manifest = json.loads((runs / "manifest.json").read_text())
    manifest["featurize_config"] = "featurize_bad.json"
    bad = runs / "manifest_bad.json"
    bad.write_text(json.dumps(manifest))
    assert main(["featurize", "--manifest", str(bad), "--out", str(tmp_path / "f.csv")]) == 1
    assert "S9" in capsys.readouterr().err


def test_wrong_feature_dimension_fails_prediction(workspace, tmp_path, write_csv):
    model = workspace / "dim_model.txt"
    manifest = str(workspace / "runs" / "manifest.json")
    assert main(["train", "--manifest", manifest, "--hyperparams", str(workspace / "linear.hyperparams"), "--out", str(model)]) == 0
    features = write_csv("short.csv", "wafer_id,f000,f001\nR21,1.0,2.0\n")
    assert main(["predict", "--model", str(model), "--features", str(features)]) == 1


def log_lines(err: str) -> list[dict]:
    return [json.loads(line) for line in err.splitlines() if line.startswith("{")]


def test_featurize_writes_training_table(workspace):
    manifest = str(workspace / "runs" / "manifest.json")
    features, table = workspace / "table_features.csv", workspace / "table.csv"
    assert main(["featurize", "--manifest", manifest, "--out", str(features), "--dataset-out", str(table)]) == 0
    ds = read_dataset(table)
    assert ds.wafers() == [f"R{n}" for n in range(21, 27)]
    assert ds.feature_dim == 2 * 2 * 12
    assert not ds.has_synthetic()
    assert set(ds.target_names()) == {"recess"}
    by_wafer = pd.read_csv(features).set_index("wafer_id")
    for e in ds.examples:
        assert e.x.tolist() == pytest.approx(by_wafer.loc[e.wafer_id].to_numpy(dtype=float).tolist(), rel=1e-15)


def test_search_reports_previous_search_from_cache(workspace, tmp_path, capsys):
    manifest = str(workspace / "runs" / "manifest.json")
    search = [
        "search", "--manifest", manifest, "--grid", str(workspace / "grid.txt"),
        "--cache", f"sqlite:///{tmp_path / 'results.db'}", "--out", str(tmp_path / "rank.csv"),
    ]
    assert main(search) == 0
    assert not [r for r in log_lines(capsys.readouterr().err) if r["message"] == "Previous search on this dataset"]
    assert main(search) == 0
    previous = [r for r in log_lines(capsys.readouterr().err) if r["message"] == "Previous search on this dataset"]
    assert len(previous) == 1
    assert previous[0]["evaluated"] == 2
    assert previous[0]["count"] == 2
    assert "learning_rate=" in previous[0]["hyperparams"]


class ErrorRecorder:
    def __init__(self):
        self.init_kwargs = None
        self.captured = []

    def init(self, **kwargs):
        self.init_kwargs = kwargs

    def capture_exception(self, error=None):
        self.captured.append(error)


@pytest.fixture
def recorder(monkeypatch):
    rec = ErrorRecorder()
    monkeypatch.setattr(app.main, "sentry_sdk", rec)
    monkeypatch.setattr(settings, "SENTRY_DSN", "https://key@example.invalid/1")
    return rec


def test_domain_errors_are_reported_when_dsn_is_set(workspace, recorder):
    manifest = str(workspace / "runs" / "manifest.json")
    code = main(["search", "--manifest", manifest, "--grid", str(workspace / "grid.txt"), "--budget", "0", "--cache", ""])
    assert code == 1
    assert recorder.init_kwargs["dsn"] == "https://key@example.invalid/1"
    assert recorder.init_kwargs["environment"] == settings.APP_ENV
    assert len(recorder.captured) == 1
    assert isinstance(recorder.captured[0], ConfigError)


def test_unexpected_errors_are_reported_and_raised(workspace, recorder, monkeypatch):
    def crash(args):
        raise RuntimeError("boom")

    monkeypatch.setattr(app.commands.synth, "run", crash)
    with pytest.raises(RuntimeError):
        main(["synth", "--config", str(workspace / "synth.json"), "--out", str(workspace / "unused")])
    assert [type(e) for e in recorder.captured] == [RuntimeError]


def test_no_error_reporting_without_dsn(workspace, monkeypatch):
    rec = ErrorRecorder()
    monkeypatch.setattr(app.main, "sentry_sdk", rec)
    monkeypatch.setattr(settings, "SENTRY_DSN", None)
    manifest = str(workspace / "runs" / "manifest.json")
    assert main(["search", "--manifest", manifest, "--grid", str(workspace / "grid.txt"), "--budget", "0", "--cache", ""]) == 1
    assert rec.init_kwargs is None
    assert rec.captured == []
