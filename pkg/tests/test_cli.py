import csv
import json

import numpy as np
import pytest
import yaml

import published
from hybrid_nilm import cli
from hybrid_nilm.data import NormStats, TimeSeries, load_refit_csv, load_series_csv, write_refit_csv
from hybrid_nilm.evaluation import ApplianceMetrics, MetricsReport, aggregate_overall
from hybrid_nilm.model import ModelConfig, build_model, load_model, save_model, zero_model

TINY_MODEL = {"window_len": 20, "conv_filters": 2, "conv_kernel_width": 3, "pool_size": 3,
              "lstm1_hidden": 4, "lstm2_hidden": 3, "dense1_units": 8}


def write_config(tmp_path, **sections):
    raw = {
        "output_dir": "run",
        "seed": 3,
        "data": {"refit_csv": "house.csv", "appliances": {"kettle": 1, "fridge": 2}},
        "model": dict(TINY_MODEL),
        "train": {"epochs": 2, "batch_size": 16},
        "synth": {
            "output": "house.csv",
            "duration_samples": 400,
            "noise_std": 5.0,
            "appliances": [
                {"name": "kettle", "power": 2000, "kind": "spike", "on_range": [3, 6], "off_range": [20, 60]},
                {"name": "fridge", "power": 100, "kind": "cyclic", "on_range": [10, 20], "off_range": [10, 30]},
            ],
        },
    }
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw, sort_keys=False))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def pipeline(tmp_path):
    """synth -> prepare -> train -> disaggregate on a 400-sample two-appliance house."""
    cfg = write_config(tmp_path)
    for verb in ("synth", "prepare", "train", "disaggregate"):
        assert run(verb, "--config", cfg) == 0, verb
    return cfg, tmp_path / "run"


# ---------------------------------------------------------------- prepare


def thousand_rows(path):
    rng = np.random.default_rng(0)
    ts = 1_400_000_000 + 8 * np.arange(1000)
    app = TimeSeries(ts, np.where(rng.random(1000) < 0.1, 1500.0, 0.0), "a")
    agg = TimeSeries(ts, app.values + rng.integers(50, 150, 1000), "aggregate")
    write_refit_csv(agg, [app], path)


def test_prepare_manifest_counts(tmp_path):
    thousand_rows(tmp_path / "house.csv")
    cfg = write_config(tmp_path, data={"appliances": {"a": 1}}, model={**TINY_MODEL, "window_len": 100})
    assert run("prepare", "--config", cfg) == 0
    manifest = json.loads((tmp_path / "run/prepared/manifest.json").read_text())
    entry = manifest["appliances"]["a"]
    assert (entry["train_len"], entry["test_len"]) == (700, 300)
    assert entry["split_index"] == 700
    assert entry["train_windows"] == (700 - 100) // 1 + 1 == 601
    assert entry["test_windows"] == (300 - 100) // 100 + 1 == 3
    assert entry["rows_dropped"] == 0


def test_prepare_missing_input_leaves_nothing(tmp_path, capsys):
    cfg = write_config(tmp_path, data={"refit_csv": "nope.csv"})
    assert run("prepare", "--config", cfg) == 2
    assert "prepare" in capsys.readouterr().err
    assert not (tmp_path / "run").exists() or not any((tmp_path / "run").iterdir())


def test_prepare_failure_midway_leaves_no_partial_output(tmp_path):
    thousand_rows(tmp_path / "house.csv")
    # second appliance asks for a window longer than its series
    cfg = write_config(tmp_path, data={"appliances": {"a": 1, "b": 2}, "region": {"start": 0, "length": 1000}},
                       model={**TINY_MODEL, "window_len": 400})
    assert run("prepare", "--config", cfg) == 2
    assert not (tmp_path / "run/prepared").exists()
    assert [p.name for p in (tmp_path / "run").iterdir()] == []


def test_prepare_rerun_byte_identical(tmp_path):
    thousand_rows(tmp_path / "house.csv")
    cfg = write_config(tmp_path, data={"appliances": {"a": 1}})
    assert run("prepare", "--config", cfg) == 0
    first = snapshot(tmp_path / "run")
    assert run("prepare", "--config", cfg) == 0
    assert snapshot(tmp_path / "run") == first


# ---------------------------------------------------------------- synth


def test_synth_is_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    assert run("synth", "--config", cfg) == 0
    first = (tmp_path / "house.csv").read_bytes()
    assert run("synth", "--config", cfg) == 0
    assert (tmp_path / "house.csv").read_bytes() == first
    assert run("synth", "--config", cfg, "--seed", 4) == 0
    assert (tmp_path / "house.csv").read_bytes() != first


def test_synth_without_appliances_is_clamped_noise(tmp_path):
    cfg = write_config(tmp_path, synth={"output": "noise.csv", "duration_samples": 300, "noise_std": 20.0,
                                        "appliances": []})
    assert run("synth", "--config", cfg) == 0
    agg, app = load_refit_csv(tmp_path / "noise.csv", 1)
    assert len(agg) == 300
    assert agg.values.min() == 0.0 and agg.values.max() > 0.0
    assert not app.values.any()
    assert 0.2 < np.mean(agg.values == 0.0) < 0.8


def test_identity_pipeline_scores_perfectly(tmp_path):
    cfg = write_config(tmp_path)
    assert run("synth", "--config", cfg) == 0
    assert run("prepare", "--config", cfg) == 0
    truth = tmp_path / "run/prepared/kettle/test_truth.csv"
    assert run("evaluate", "--config", cfg, "--truth", truth, "--pred", truth, "--appliance", "kettle") == 0
    metrics = json.loads((tmp_path / "run/metrics.json").read_text())["appliances"]["kettle"]
    assert (metrics["ane"], metrics["rmse"], metrics["accuracy"], metrics["f1"]) == (0.0, 0.0, 1.0, 1.0)


# ---------------------------------------------------------------- train


def test_train_single_epoch(tmp_path):
    cfg = write_config(tmp_path, train={"epochs": 1, "batch_size": 16})
    for verb in ("synth", "prepare", "train"):
        assert run(verb, "--config", cfg, "--appliance", "kettle") == 0
    rows = (tmp_path / "run/models/kettle_history.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,valid_loss" and len(rows) == 2
    assert load_model(tmp_path / "run/models/kettle.nilm").config.window_len == 20


def test_train_zero_lr_keeps_initial_parameters(tmp_path):
    cfg = write_config(tmp_path, train={"epochs": 2, "learning_rate": 0.0})
    for verb in ("synth", "prepare", "train"):
        assert run(verb, "--config", cfg, "--appliance", "kettle") == 0
    initial = build_model(ModelConfig(**TINY_MODEL, seed=3)).get_flat()
    for name in ("kettle.nilm", "kettle_final.nilm"):
        assert load_model(tmp_path / "run/models" / name).get_flat().tobytes() == initial.tobytes()


def test_train_divergence_exit_code(tmp_path):
    cfg = write_config(tmp_path)
    assert run("synth", "--config", cfg) == 0
    assert run("prepare", "--config", cfg) == 0
    targets = tmp_path / "run/prepared/kettle/train_targets.npy"
    y = np.load(targets)
    y[0, 0] = np.inf
    np.save(targets, y)
    assert run("train", "--config", cfg, "--appliance", "kettle") == 3


def test_train_without_prepared_data(tmp_path):
    assert run("train", "--config", write_config(tmp_path)) == 2


# ---------------------------------------------------------------- disaggregate


def write_mains(path, n, value=500.0):
    ts = 1_400_000_000 + 8 * np.arange(n)
    with open(path, "w") as fh:
        fh.write("unix_seconds,watts\n")
        fh.writelines(f"{t},{value}\n" for t in ts)


@pytest.mark.parametrize("target_mean,expected", [(37.5, 37.5), (-12.0, 0.0)])
def test_zero_model_predicts_target_mean(tmp_path, target_mean, expected):
    cfg = write_config(tmp_path)
    model = zero_model(ModelConfig(**{**TINY_MODEL, "forget_bias": 0.0}))
    ckpt = save_model(model, tmp_path / "zero.nilm", {
        "appliance": "kettle", "input_stats": NormStats(300.0, 50.0).to_dict(),
        "target_stats": NormStats(target_mean, 10.0).to_dict()})
    write_mains(tmp_path / "mains.csv", 57)
    assert run("disaggregate", "--config", cfg, "--checkpoint", ckpt, "--mains", tmp_path / "mains.csv") == 0
    pred = load_series_csv(tmp_path / "run/predictions/kettle.csv")
    assert len(pred) == 57
    assert np.all(pred.values == expected)


def test_disaggregate_short_mains(tmp_path, capsys):
    cfg = write_config(tmp_path)
    ckpt = save_model(build_model(ModelConfig(**TINY_MODEL)), tmp_path / "m.nilm", {
        "appliance": "kettle", "input_stats": {"mean": 0, "std": 1}, "target_stats": {"mean": 0, "std": 1}})
    write_mains(tmp_path / "mains.csv", 19)
    assert run("disaggregate", "--config", cfg, "--checkpoint", ckpt, "--mains", tmp_path / "mains.csv") == 2
    assert "19" in capsys.readouterr().err


def test_disaggregate_is_repeatable(pipeline):
    cfg, out = pipeline
    first = (out / "predictions/kettle.csv").read_bytes()
    assert run("disaggregate", "--config", cfg) == 0
    assert (out / "predictions/kettle.csv").read_bytes() == first
    pred = load_series_csv(out / "predictions/kettle.csv")
    truth = load_series_csv(out / "prepared/kettle/test_truth.csv")
    assert np.array_equal(pred.timestamps, truth.timestamps)
    assert np.all(pred.values >= 0)


# ---------------------------------------------------------------- evaluate


def test_evaluate_writes_table(pipeline):
    cfg, out = pipeline
    assert run("evaluate", "--config", cfg) == 0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["Metrics", "kettle", "fridge", "Overall"]
    report = json.loads((out / "metrics.json").read_text())
    assert set(report["appliances"]) == {"kettle", "fridge"}
    assert report["combined_ane"] is not None


def test_evaluate_length_mismatch(tmp_path, capsys):
    cfg = write_config(tmp_path)
    write_mains(tmp_path / "t.csv", 30)
    write_mains(tmp_path / "p.csv", 25)
    code = run("evaluate", "--config", cfg, "--truth", tmp_path / "t.csv", "--pred", tmp_path / "p.csv")
    assert code == 2
    err = capsys.readouterr().err
    assert "30" in err and "25" in err


def test_overall_row_from_published_records(tmp_path):
    records = [ApplianceMetrics(a, r, acc / 100.0, f / 100.0)
               for a, r, acc, f in zip(published.ANE, published.RMSE, published.ACCURACY_PCT, published.F1_PCT)]
    report = MetricsReport(dict(zip(published.APPLIANCES, records)), aggregate_overall(records))
    report.to_csv(tmp_path / "metrics.csv")
    with open(tmp_path / "metrics.csv") as fh:
        rows = {r[0]: r for r in csv.reader(fh)}
    assert rows["Metrics"][-1] == "Overall"
    got = {"ane": rows["ANE"][-1], "rmse": rows["RMSE"][-1],
           "accuracy": rows["Accuracy (%)"][-1], "f1": rows["F1 score (%)"][-1]}
    for key, (printed, digits) in published.OVERALL.items():
        assert round(float(got[key]), digits) == printed, key


# ---------------------------------------------------------------- report


def test_report_bundles(pipeline):
    cfg, out = pipeline
    assert run("report", "--config", cfg) == 0
    bundle = out / "report/kettle_series.csv"
    with open(bundle) as fh:
        rows = list(csv.reader(fh))
    with open(out / "prepared/kettle/test_truth.csv") as fh:
        truth = list(csv.reader(fh))
    assert rows[0] == ["unix_seconds", "truth_watts", "pred_watts"]
    assert len(rows) == len(truth)
    assert [r[1] for r in rows[1:]] == [r[1] for r in truth[1:]]
    assert [r[0] for r in rows[1:]] == [r[0] for r in truth[1:]]
    for name in ("kettle.png", "kettle_loss.png", "fridge.png"):
        assert (out / "report" / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    first = snapshot(out / "report")
    assert run("report", "--config", cfg) == 0
    assert snapshot(out / "report") == first


def test_report_without_figures(pipeline):
    cfg, out = pipeline
    assert run("report", "--config", cfg, "--no-figures") == 0
    assert sorted(p.name for p in (out / "report").iterdir()) == ["fridge_series.csv", "kettle_series.csv"]


def test_commands_do_not_touch_inputs(pipeline):
    cfg, out = pipeline
    house = (cfg.parent / "house.csv").read_bytes()
    prepared = snapshot(out / "prepared")
    for verb in ("disaggregate", "evaluate", "report"):
        assert run(verb, "--config", cfg) == 0
    assert (cfg.parent / "house.csv").read_bytes() == house
    assert snapshot(out / "prepared") == prepared


# ---------------------------------------------------------------- usage and config


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--seed", "abc"])
    assert exc.value.code == 1


def test_bad_config_exit_two(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("model: {window_len: 100, bogus: 3}\n")
    assert run("synth", "--config", path) == 2
    assert run("synth", "--config", tmp_path / "missing.yaml") == 2


def test_out_flag_overrides_output_dir(tmp_path):
    cfg = write_config(tmp_path, synth={"output": None})
    assert run("synth", "--config", cfg, "--out", tmp_path / "elsewhere") == 0
    assert (tmp_path / "elsewhere/synthetic.csv").is_file()
