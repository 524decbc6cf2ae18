"""Command-line entry point: ``hybrid-nilm {prepare,synth,train,disaggregate,evaluate,report}``.

Exit codes: 0 success, 1 usage error, 2 I/O or validation error,
3 numerical divergence during training.

Run-directory layout (all under ``--out`` or ``output_dir``)::

    synthetic.csv                      synth
    prepared/manifest.json             prepare
    prepared/<appliance>/*.npy, stats.json, test_mains.csv, test_truth.csv
    models/<appliance>.nilm            train (best validation)
    models/<appliance>_final.nilm      train (last epoch)
    models/<appliance>_history.csv     train
    predictions/<appliance>.csv        disaggregate
    metrics.json, metrics.csv          evaluate
    report/<appliance>_series.csv      report (+ .png figures)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, RunConfig, load_config, parse_config
from .evaluation import MetricError, build_report
from .model import CheckpointError, build_model, load_model, read_checkpoint_header, save_model
from .tensor_core import ShapeError
from .training import TrainingDiverged, read_history_csv, train, write_history_csv

log = logging.getLogger("hybrid_nilm")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3


class CommandError(Exception):
    """A failure in a named pipeline stage."""

    def __init__(self, stage: str, message: str, code: int = EXIT_IO):
        super().__init__(f"{stage}: {message}")
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _write_json(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _replace_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)


def _appliances(cfg: RunConfig, only: list[str] | None) -> list[str]:
    names = list(cfg.data.appliances)
    if only:
        missing = [n for n in only if n not in names]
        if missing:
            raise CommandError("config", f"appliances {missing} not in [data] appliances {names}")
        names = only
    if not names:
        raise CommandError("config", "no appliances configured under [data] appliances")
    return names


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> Path:
    target = cfg.synth_output or (_out(cfg) / "synthetic.csv")
    agg, apps = D.generate_synthetic(cfg.synth)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    D.write_refit_csv(agg, apps, tmp)
    tmp.replace(target)
    log.info("wrote %d samples, %d appliances to %s", len(agg), len(apps), target)
    return target


def cmd_prepare(cfg: RunConfig, only: list[str] | None = None) -> Path:
    src = cfg.data.refit_csv
    if src is None:
        raise CommandError("prepare", "[data] refit_csv is not set")
    if not Path(src).is_file():
        raise CommandError("prepare", f"input file not found: {src}")
    names = _appliances(cfg, only)
    W = cfg.window_len
    test_stride = cfg.data.test_stride or W
    out = _out(cfg) / "prepared"
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".prepared-", dir=out.parent))
    try:
        manifest = {"source": str(src), "window_len": W, "train_fraction": cfg.data.train_fraction,
                    "train_stride": cfg.data.train_stride, "test_stride": test_stride,
                    "appliances": {}}
        for name in names:
            col = cfg.data.appliances[name]
            try:
                mains, app = D.load_refit_csv(src, col, name, cfg.data.nominal_spacing)
            except D.DataError as exc:
                raise CommandError("prepare/load", str(exc)) from exc
            rows = len(mains)
            stop = rows if cfg.data.region_length is None else cfg.data.region_start + int(cfg.data.region_length)
            mains_r = mains.slice(cfg.data.region_start, min(stop, rows))
            app_r = app.slice(cfg.data.region_start, min(stop, rows))
            try:
                sp = D.prepare_split(mains_r, app_r, W, cfg.data.train_fraction,
                                     cfg.data.train_stride, test_stride)
            except D.DataError as exc:
                raise CommandError("prepare/window", f"{name}: {exc}") from exc
            d = tmp / name
            d.mkdir()
            np.save(d / "train_inputs.npy", sp.train.inputs)
            np.save(d / "train_targets.npy", sp.train.targets)
            np.save(d / "train_starts.npy", sp.train.starts)
            np.save(d / "test_inputs.npy", sp.test.inputs)
            np.save(d / "test_targets.npy", sp.test.targets)
            np.save(d / "test_starts.npy", sp.test.starts)
            _write_json({"input": sp.train.input_stats.to_dict(),
                         "target": sp.train.target_stats.to_dict()}, d / "stats.json")
            D.write_series_csv(sp.test_mains, d / "test_mains.csv")
            D.write_series_csv(sp.test_target, d / "test_truth.csv")
            manifest["appliances"][name] = {
                "column": col,
                "rows_kept": rows,
                "rows_dropped": mains.drop_count,
                "region": [cfg.data.region_start, cfg.data.region_start + len(mains_r)],
                "split_index": sp.split_at,
                "train_len": len(sp.train_mains),
                "test_len": len(sp.test_mains),
                "train_windows": len(sp.train),
                "test_windows": len(sp.test),
                "gap_count": int(mains_r.gap_before.sum()),
                "train_windows_excluded_for_gaps": sp.train.excluded_gap_windows,
                "test_windows_excluded_for_gaps": sp.test.excluded_gap_windows,
                "input_stats": sp.train.input_stats.to_dict(),
                "target_stats": sp.train.target_stats.to_dict(),
            }
        _write_json(manifest, tmp / "manifest.json")
        _replace_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    log.info("prepared %s into %s", ", ".join(names), out)
    return out


def _load_prepared(cfg: RunConfig, name: str):
    d = _out(cfg) / "prepared" / name
    if not (d / "stats.json").is_file():
        raise CommandError("train", f"no prepared dataset for {name!r} in {d}; run `prepare` first")
    stats = json.loads((d / "stats.json").read_text())
    in_stats, tgt_stats = D.NormStats.from_dict(stats["input"]), D.NormStats.from_dict(stats["target"])
    W = cfg.window_len
    sets = []
    for split, stride in (("train", cfg.data.train_stride), ("test", cfg.data.test_stride or W)):
        x = np.load(d / f"{split}_inputs.npy")
        y = np.load(d / f"{split}_targets.npy")
        if x.ndim != 2 or x.shape[1] != W:
            raise CommandError("train", f"prepared {split} windows have shape {x.shape}, model window is {W}")
        sets.append(D.WindowedDataset(x, y, in_stats, tgt_stats, W, stride,
                                      np.load(d / f"{split}_starts.npy")))
    return sets[0], sets[1], in_stats, tgt_stats


def cmd_train(cfg: RunConfig, only: list[str] | None = None) -> list[Path]:
    written = []
    models = _out(cfg) / "models"
    models.mkdir(parents=True, exist_ok=True)
    for name in _appliances(cfg, only):
        train_set, test_set, in_stats, tgt_stats = _load_prepared(cfg, name)
        if len(train_set) == 0 or len(test_set) == 0:
            raise CommandError("train", f"{name}: empty train or test window set")
        model = build_model(cfg.model)
        meta = {"appliance": name, "input_stats": in_stats.to_dict(),
                "target_stats": tgt_stats.to_dict(), "threshold": cfg.threshold(name)}
        best_path = models / f"{name}.nilm"
        log.info("training %s: %d train / %d validation windows, %d parameters",
                 name, len(train_set), len(test_set), model.num_parameters)
        try:
            res = train(model, train_set, test_set, cfg.train, checkpoint_path=best_path, metadata=meta,
                        on_epoch=lambda r: log.info("%s epoch %d train %.5f valid %.5f",
                                                    name, r.epoch, r.train_loss, r.valid_loss))
        except TrainingDiverged as exc:
            raise CommandError("train", f"{name}: {exc}", EXIT_DIVERGED) from exc
        save_model(res.model, models / f"{name}_final.nilm", {**meta, "epoch": cfg.train.epochs})
        write_history_csv(res.history, models / f"{name}_history.csv")
        written.append(best_path)
    return written


def _checkpoint_stats(path: Path):
    meta = read_checkpoint_header(path).get("metadata", {})
    try:
        return (meta.get("appliance"), D.NormStats.from_dict(meta["input_stats"]),
                D.NormStats.from_dict(meta["target_stats"]))
    except KeyError:
        raise CommandError("disaggregate", f"{path}: checkpoint lacks normalization stats") from None


def disaggregate_series(model, mains: D.TimeSeries, in_stats: D.NormStats, tgt_stats: D.NormStats,
                        stride: int | None = None) -> np.ndarray:
    """Predicted appliance watts for every sample of ``mains`` (tail covered by
    one extra end-aligned window)."""
    W = model.config.window_len
    if len(mains) < W:
        raise CommandError("disaggregate", f"mains has {len(mains)} samples, window needs {W}")
    stride = stride or W
    starts = D.window_starts(len(mains), W, stride, cover_tail=True)
    z = D.normalize(mains.values, in_stats)
    windows = z[starts[:, None] + np.arange(W)[None, :]]
    preds = model.predict(windows)
    return D.stitch_predictions(preds, stride, len(mains), tgt_stats, starts=starts)


def cmd_disaggregate(cfg: RunConfig, checkpoint: Path | None = None, mains_csv: Path | None = None,
                     only: list[str] | None = None) -> list[Path]:
    jobs = []
    if checkpoint is not None:
        name, _, _ = _checkpoint_stats(Path(checkpoint))
        name = (only[0] if only else None) or name or Path(checkpoint).stem
        jobs.append((name, Path(checkpoint)))
    else:
        for name in _appliances(cfg, only):
            jobs.append((name, _out(cfg) / "models" / f"{name}.nilm"))
    out_dir = _out(cfg) / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, ckpt in jobs:
        if not ckpt.is_file():
            raise CommandError("disaggregate", f"checkpoint not found: {ckpt}")
        model = load_model(ckpt)
        _, in_stats, tgt_stats = _checkpoint_stats(ckpt)
        src = Path(mains_csv) if mains_csv else _out(cfg) / "prepared" / name / "test_mains.csv"
        mains = D.load_series_csv(src, "aggregate", cfg.data.nominal_spacing)
        watts = disaggregate_series(model, mains, in_stats, tgt_stats, cfg.data.inference_stride)
        path = out_dir / f"{name}.csv"
        D.write_series_csv(D.TimeSeries(mains.timestamps, watts, name), path)
        written.append(path)
        log.info("wrote %s predictions (%d samples) to %s", name, len(mains), path)
    return written


def _pairs(cfg: RunConfig, truths, preds, names) -> dict[str, tuple[D.TimeSeries, D.TimeSeries]]:
    if truths or preds:
        if len(truths) != len(preds):
            raise CommandError("evaluate", "give one --pred for every --truth")
        names = names or [Path(t).stem for t in truths]
        if len(names) != len(truths):
            raise CommandError("evaluate", "give one --appliance name for every --truth")
        files = list(zip(names, truths, preds))
    else:
        names = _appliances(cfg, names)
        files = [(n, _out(cfg) / "prepared" / n / "test_truth.csv", _out(cfg) / "predictions" / f"{n}.csv")
                 for n in names]
    pairs = {}
    for name, t, p in files:
        truth = D.load_series_csv(t, name, cfg.data.nominal_spacing)
        pred = D.load_series_csv(p, name, cfg.data.nominal_spacing)
        if len(truth) != len(pred):
            raise CommandError(
                "evaluate", f"{name}: truth has {len(truth)} samples but prediction has {len(pred)}")
        if not np.array_equal(truth.timestamps, pred.timestamps):
            raise CommandError("evaluate", f"{name}: truth and prediction timestamps differ")
        pairs[name] = (truth, pred)
    return pairs


def cmd_evaluate(cfg: RunConfig, truths=(), preds=(), names=None):
    pairs = _pairs(cfg, list(truths), list(preds), names)
    report = build_report({n: (t.values, p.values) for n, (t, p) in pairs.items()},
                          {n: cfg.threshold(n) for n in pairs})
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    for name, m in report.per_appliance.items():
        log.info("%s: ANE %.4f RMSE %.2f accuracy %.4f F1 %.4f", name, m.ane, m.rmse, m.accuracy, m.f1)
    return report


def _read_tokens(path: Path) -> tuple[list[str], list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["unix_seconds", "watts"]:
        raise CommandError("report", f"{path}: expected unix_seconds,watts header")
    body = [r for r in rows[1:] if r]
    return [r[0] for r in body], [r[1] for r in body]


def cmd_report(cfg: RunConfig, run_dir: Path | None = None, figures: bool = True) -> list[Path]:
    from .plotting import plot_disaggregation, plot_loss_history

    run = Path(run_dir) if run_dir else _out(cfg)
    pred_dir = run / "predictions"
    if not pred_dir.is_dir():
        raise CommandError("report", f"no predictions in {run}; run `disaggregate` first")
    names = list(cfg.data.appliances) or sorted(p.stem for p in pred_dir.glob("*.csv"))
    out = run / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in names:
        truth_path = run / "prepared" / name / "test_truth.csv"
        pred_path = pred_dir / f"{name}.csv"
        if not (truth_path.is_file() and pred_path.is_file()):
            raise CommandError("report", f"{name}: missing {truth_path if not truth_path.is_file() else pred_path}")
        t_ts, t_w = _read_tokens(truth_path)
        p_ts, p_w = _read_tokens(pred_path)
        if t_ts != p_ts:
            raise CommandError("report", f"{name}: truth ({len(t_ts)}) and prediction ({len(p_ts)}) not aligned")
        bundle = out / f"{name}_series.csv"
        with open(bundle, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unix_seconds", "truth_watts", "pred_watts"])
            w.writerows(zip(t_ts, t_w, p_w))
        written.append(bundle)
        if figures:
            fig = out / f"{name}.png"
            plot_disaggregation(np.array(t_ts, dtype=float), np.array(t_w, dtype=float),
                                np.array(p_w, dtype=float), f"{name}: measured and predicted power", fig)
            written.append(fig)
            hist = run / "models" / f"{name}_history.csv"
            if hist.is_file():
                h = read_history_csv(hist)
                lp = out / f"{name}_loss.png"
                plot_loss_history([r.epoch for r in h], [r.train_loss for r in h],
                                  [r.valid_loss for r in h], f"Training loss ({name})", lp)
                written.append(lp)
    return written


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (defaults if omitted)")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="seed for model init, shuffling and synth (overrides config)")
    common.add_argument("--appliance", action="append", dest="appliances",
                        help="restrict to this appliance (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="hybrid-nilm", description="CNN-LSTM energy disaggregation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="window and normalize a REFIT CSV")
    sub.add_parser("synth", parents=[common], help="write a synthetic household in REFIT layout")
    sub.add_parser("train", parents=[common], help="train one model per appliance")
    d = sub.add_parser("disaggregate", parents=[common], help="predict appliance power from mains")
    d.add_argument("--checkpoint", type=Path)
    d.add_argument("--mains", type=Path, help="mains CSV (unix_seconds,watts or REFIT layout)")
    e = sub.add_parser("evaluate", parents=[common], help="compute metrics and the overall table")
    e.add_argument("--truth", type=Path, action="append", default=[])
    e.add_argument("--pred", type=Path, action="append", default=[])
    r = sub.add_parser("report", parents=[common], help="write plot-data bundles and figures")
    r.add_argument("--run-dir", type=Path)
    r.add_argument("--no-figures", action="store_true")
    return p


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if args.out is not None:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "prepare":
            cmd_prepare(cfg, args.appliances)
        elif args.command == "train":
            cmd_train(cfg, args.appliances)
        elif args.command == "disaggregate":
            cmd_disaggregate(cfg, args.checkpoint, args.mains, args.appliances)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.truth, args.pred, args.appliances)
        elif args.command == "report":
            cmd_report(cfg, args.run_dir, not args.no_figures)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, D.DataError, MetricError, CheckpointError, ShapeError,
            OSError, ValueError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
