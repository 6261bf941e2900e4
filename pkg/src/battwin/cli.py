"""``battwin`` command-line entry point.

Exit codes: 0 success, 2 bad input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from ._io import config_hash, dump_json, header_lines, load_json
from .calibration import (DEFAULT_RATES, CalibrationError, ParameterSpace, calibrate, history_csv,
                          make_reference, overlay_csv, reference_from_records, simulate_discharge)
from .dagmm import DagmmError, DagmmScorer, uncertainty_csv
from .dataio import (FeatureError, FeatureTable, IngestionError, SplitError, load_fleet_features,
                     load_telemetry, split_by_cell)
from .degrade import EndOfLifeError, generate_fleet
from .evaluation import NOISE_LEVELS, noise_experiment, soh_metrics, spearman
from .gp import GpFitError
from .params import CellParameters, ParameterError, dump_params, load_params
from .pinn import SohPinnRegressor, TrainingError, predictions_csv
from .protocol import FAMILIES, ProtocolError, TelemetrySink, family_schedule, load_protocol, run_schedule, with_repeats
from .sim import SimulationError

log = logging.getLogger("battwin")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


def _require(path, what="file"):
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _outdir(path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from exc


OUTPUT_ARGS = ("out", "out_dir", "history", "report")
INPUT_ARGS = ("params", "protocol", "space", "data", "model", "uq", "features", "predictions", "uncertainty")


def _content_digest(path) -> str:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        return str(path)
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _run_hash(args, exclude=("func", "verbose", "jobs") + OUTPUT_ARGS) -> str:
    """Hash of the run configuration.

    Inputs enter by content rather than location; outputs and worker counts do not count.
    """
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in exclude:
            continue
        cfg[k] = _content_digest(v) if k in INPUT_ARGS and v else v
    return config_hash(cfg)


def _write(path, text: str) -> None:
    _outdir(path).write_text(text, encoding="utf-8")


def _params(args) -> CellParameters:
    if getattr(args, "params", None):
        return load_params(_require(args.params, "parameter file"))
    return CellParameters()


# -- subcommands --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    params = _params(args)
    comments = header_lines(_run_hash(args), args.seed)
    if args.reference_rates:
        rates = _floats(args.reference_rates)
        sink = TelemetrySink(args.cell_id)
        for k, r in enumerate(rates):
            t, V, T = simulate_discharge(params, r, args.T_amb, args.dt)
            sink.append(k, t, np.full(len(t), r * params.Q_nom), V, T)
    else:
        sched = load_protocol(_require(args.protocol, "protocol file")) if args.protocol \
            else family_schedule(args.family, T_amb=args.T_amb)
        if args.cycles:
            sched = with_repeats(sched, args.cycles)
        sink, _ = run_schedule(params, sched, seed=args.seed, dt=args.dt, cell_id=args.cell_id)
    sink.to_csv(_outdir(args.out), comments=comments, stride=args.stride)
    print(f"wrote {len(sink)} samples to {args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    families = tuple(f.strip() for f in args.families.split(",") if f.strip())
    bad = [f for f in families if f not in FAMILIES]
    if bad:
        raise InputError(f"unknown family tag(s) {', '.join(bad)}; valid tags: {', '.join(FAMILIES)}")
    out = Path(args.out_dir)
    manifest = generate_fleet(families, args.cells, args.cycles, args.seed, out, _params(args),
                              sample_interval=args.sample_interval, n_jobs=args.jobs)
    table = load_fleet_features(out, manifest)
    table.to_csv(out / "features.csv", comments=header_lines(manifest["config_hash"], args.seed))
    print(f"wrote {len(manifest['telemetry_files'])} telemetry files, labels and features to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    base = _params(args)
    space = ParameterSpace.from_toml(_require(args.space, "space file")) if args.space else ParameterSpace.around(base)
    n0 = 2 * space.dim
    if args.budget < n0:
        raise InputError(f"budget {args.budget} is below the required minimum of {n0} (2 x {space.dim} dimensions)")
    if args.data:
        reference = reference_from_records(load_telemetry(_require(args.data, "reference telemetry")), base.Q_nom)
    else:
        reference = make_reference(base, _floats(args.rates))
    comments = header_lines(_run_hash(args), args.seed)
    best, history = calibrate(space, reference, args.budget, args.seed, base)
    best_params = base.replace(**best.theta)
    dump_params(best_params, _outdir(args.out), "\n".join(comments))
    hist_path = args.history or str(Path(args.out).with_suffix("")) + "_history.csv"
    _write(hist_path, "".join(f"# {c}\n" for c in comments) + history_csv(history, space))
    if args.report:
        _write(args.report, "".join(f"# {c}\n" for c in comments) + overlay_csv(best_params, reference))
    for rate, mv, mt in best.per_rate:
        print(f"{rate:g}C: voltage MAPE {mv:.3f}%  temperature MAPE {mt:.3f}%")
    print(f"best J {best.J:.4f} after {len(history)} evaluations; parameters written to {args.out}")
    return EXIT_OK


def _features(path) -> FeatureTable:
    p = _require(path, "feature data")
    return load_fleet_features(p) if p.is_dir() else FeatureTable.from_csv(p)


def cmd_train_soh(args) -> int:
    table = _features(args.data)
    if table.soh is None:
        raise InputError("training features need an soh column")
    train, test = split_by_cell(table, args.test_fraction, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = _run_hash(args)
    comments = header_lines(chash, args.seed)
    model = SohPinnRegressor(epochs=args.epochs, seed=args.seed).fit(train.X, train.soh, train.max_cycle)
    model.save(out / "soh_model.json", comments)
    train.to_csv(out / "features_train.csv", comments)
    test.to_csv(out / "features_test.csv", comments)
    lines = [f"# {c}" for c in comments] + ["epoch,total,data,mono,phys"]
    lines += [f"{i + 1},{r[0]:.10e},{r[1]:.10e},{r[2]:.10e},{r[3]:.10e}" for i, r in enumerate(model.loss_log_)]
    _write(out / "loss_log.csv", "\n".join(lines) + "\n")
    first, last = model.loss_log_[0, 0], model.loss_log_[-1, 0]
    print(f"trained on {len(train)} rows ({len(set(train.cell_id))} cells); loss {first:.3e} -> {last:.3e}")
    return EXIT_OK


def cmd_predict_soh(args) -> int:
    model = SohPinnRegressor.load(_require(args.model, "model file"))
    table = _features(args.features)
    pred = model.predict(table.X)
    comments = header_lines(_run_hash(args), model.seed)
    _write(args.out, predictions_csv(table.cell_id, table.cycle, pred, table.soh, comments))
    if table.soh is not None:
        m = soh_metrics(table.cell_id, table.soh, pred)
        print(f"MAPE {m['mape_overall']:.3f}%  " + "  ".join(f"{k} {v:.3f}%" for k, v in m["mape_per_family"].items()))
    return EXIT_OK


def cmd_train_uq(args) -> int:
    model = SohPinnRegressor.load(_require(args.model, "model file"))
    table = _features(args.features)
    Z = model.normalizer_.transform(table.X)
    scorer = DagmmScorer(epochs=args.epochs, seed=args.seed).fit(Z)
    comments = header_lines(_run_hash(args), args.seed)
    scorer.save(_outdir(args.out), comments, extra={"normalizer": model.normalizer_.fingerprint()})
    print(f"trained on {len(table)} rows; mixture weights {np.round(scorer.stats_.phi, 4).tolist()}")
    return EXIT_OK


def _load_pair(model_path, uq_path):
    model = SohPinnRegressor.load(_require(model_path, "model file"))
    raw = load_json(_require(uq_path, "uncertainty model"))
    scorer = DagmmScorer.from_dict(raw)
    fp = raw.get("meta", {}).get("normalizer")
    if fp and fp != model.normalizer_.fingerprint():
        raise InputError("uncertainty model was trained with a different normalizer than the SOH model")
    return model, scorer


def cmd_score_uq(args) -> int:
    model, scorer = _load_pair(args.model, args.uq)
    table = _features(args.features)
    e = scorer.score_samples(model.normalizer_.transform(table.X))
    comments = header_lines(_run_hash(args), scorer.seed)
    _write(args.out, uncertainty_csv(table.cell_id, table.cycle, e, scorer.percentile(e), comments))
    print(f"scored {len(e)} rows; median energy {np.median(e):.4f}")
    return EXIT_OK


def _read_keyed(path, value_cols):
    import pandas as pd
    p = _require(path)
    with p.open(encoding="utf-8") as fh:
        skip = sum(1 for line in fh if line.startswith("#"))
    df = pd.read_csv(p, skiprows=skip, dtype={"cell_id": str}, float_precision="round_trip")
    missing = [c for c in ("cell_id", "cycle", *value_cols) if c not in df.columns]
    if missing:
        raise InputError(f"{p}: missing column(s) {', '.join(missing)}")
    return df


def cmd_report(args) -> int:
    pred = _read_keyed(args.predictions, ("soh_pred", "soh_true"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    comments = header_lines(_run_hash(args), args.seed)
    cid = pred["cell_id"].to_numpy(dtype=str)
    y, yhat = pred["soh_true"].to_numpy(float), pred["soh_pred"].to_numpy(float)
    metrics = soh_metrics(cid, y, yhat)
    metrics["spearman_energy_vs_error"] = None
    lines = [f"# {c}" for c in comments] + ["cell_id,cycle,soh_true,soh_pred"]
    lines += [f"{c},{n},{a:.8f},{b:.8f}" for c, n, a, b in zip(cid, pred["cycle"], y, yhat)]
    _write(out / "soh_tracks.csv", "\n".join(lines) + "\n")
    if args.uncertainty:
        unc = _read_keyed(args.uncertainty, ("energy",))
        joined = pred.merge(unc, on=["cell_id", "cycle"], how="inner")
        if len(joined) == 0:
            raise InputError("uncertainty and prediction files share no (cell_id, cycle) rows")
        metrics["spearman_energy_vs_error"] = spearman(
            joined["energy"], np.abs(joined["soh_pred"] - joined["soh_true"]))
    if args.model and args.uq and args.features:
        model, scorer = _load_pair(args.model, args.uq)
        table = _features(args.features)
        if table.soh is None:
            raise InputError("noise experiment needs labelled features")
        exp = noise_experiment(model, scorer, model.normalizer_.transform(table.X), table.soh,
                               _floats(args.noise_levels), args.seed)
        _write(out / "noise_uncertainty.csv", exp.to_csv(comments))
        metrics["spearman_energy_vs_error"] = exp.spearman()
        metrics["noise_levels"] = [{"sigma": s, "median_abs_error": e, "median_energy": E}
                                   for s, e, E in exp.medians()]
    dump_json(metrics, out / "metrics.json", comments)
    print(f"MAPE {metrics['mape_overall']:.3f}%; spearman {metrics['spearman_energy_vs_error']}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="battwin", description="Battery digital-twin toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a cycling protocol and write telemetry CSV")
    p.add_argument("--params", help="cell parameter TOML (default: shipped parameters)")
    p.add_argument("--protocol", help="protocol TOML; overrides --family")
    p.add_argument("--family", default="C2", choices=FAMILIES)
    p.add_argument("--cycles", type=int, help="override the schedule repeat count")
    p.add_argument("--reference-rates", help="instead of a protocol, write full-cell discharges at these C-rates")
    p.add_argument("--T-amb", dest="T_amb", type=float, default=298.15, help="ambient temperature (K)")
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--stride", type=int, default=1, help="keep every n-th sample")
    p.add_argument("--cell-id", default="cell")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-data", help="generate a labelled synthetic fleet")
    p.add_argument("--families", default=",".join(FAMILIES))
    p.add_argument("--cells", type=int, default=8)
    p.add_argument("--cycles", type=int, default=300)
    p.add_argument("--sample-interval", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1, help="worker processes (output is identical for any value)")
    p.add_argument("--params")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("calibrate", help="Bayesian-optimization parameter calibration")
    p.add_argument("--data", help="reference telemetry CSV (one discharge per cycle); default: synthetic truth")
    p.add_argument("--params", help="base/truth parameter TOML")
    p.add_argument("--space", help="parameter space TOML (default: +-30%% box around the base parameters)")
    p.add_argument("--rates", default=",".join(f"{r:g}" for r in DEFAULT_RATES))
    p.add_argument("--budget", type=int, default=120)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="best-parameter TOML")
    p.add_argument("--history", help="history CSV (default: <out>_history.csv)")
    p.add_argument("--report", help="reference vs. simulated overlay CSV")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train-soh", help="train the physics-informed SOH predictor")
    p.add_argument("--data", required=True, help="fleet directory or features CSV with soh")
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train_soh)

    p = sub.add_parser("predict-soh", help="predict SOH for feature rows")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict_soh)

    p = sub.add_parser("train-uq", help="train the DAGMM uncertainty scorer")
    p.add_argument("--model", required=True, help="SOH model (supplies the normalizer)")
    p.add_argument("--features", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_uq)

    p = sub.add_parser("score-uq", help="energy scores for feature rows")
    p.add_argument("--model", required=True)
    p.add_argument("--uq", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score_uq)

    p = sub.add_parser("report", help="metrics JSON and plot-ready CSVs")
    p.add_argument("--predictions", required=True)
    p.add_argument("--uncertainty")
    p.add_argument("--model", help="with --uq and --features: run the noise-injection experiment")
    p.add_argument("--uq")
    p.add_argument("--features")
    p.add_argument("--noise-levels", default=",".join(f"{s:g}" for s in NOISE_LEVELS))
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return ap


NUMERIC_ERRORS = (SimulationError, TrainingError, DagmmError, GpFitError, EndOfLifeError, ArithmeticError,
                  np.linalg.LinAlgError)
INPUT_ERRORS = (InputError, ParameterError, ProtocolError, IngestionError, FeatureError, SplitError,
                FileNotFoundError, KeyError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"battwin {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CalibrationError as exc:
        print(f"battwin {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        print(f"battwin {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
