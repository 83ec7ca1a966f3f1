"""Batch command-line front end: synth -> geocode -> train -> impute ->
evaluate -> report, with per-run manifests and a strict exit-code contract
(0 success, 1 check failure, 2 usage/config error, 3 numeric failure)."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import warnings
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import bayes, gbdt, lstm, metrics, synth
from .core import (
    PersonRecord,
    RaceClass,
    RaceDistribution,
    load_marginal,
    load_name_prior_table,
    load_person_records,
    load_race_map,
    load_tract_table,
    stratified_split,
)
from .errors import DegeneratePosteriorWarning, NonFiniteLoss, RaceImputeError
from .geocode import CensusGeocoderClient

ARTIFACT_VERSION = "0.1.0"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

PROB_COLUMNS = ("p_white", "p_black", "p_hispanic", "p_asian", "p_other")


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_config(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _write_manifest(
    path: Path,
    command: str,
    flags: dict,
    seed: int | None,
    inputs: list[Path],
    outputs: list[Path],
    config_hash: str,
    started: str,
) -> None:
    doc = {
        "artifact_version": ARTIFACT_VERSION,
        "command": command,
        "flags": {k: str(v) for k, v in sorted(flags.items())},
        "seed": seed,
        "config_hash": config_hash,
        "inputs": {str(p): _sha256_file(Path(p)) for p in inputs},
        "outputs": {str(p): _sha256_file(Path(p)) for p in outputs},
        "started_utc": started,
        "finished_utc": datetime.now(timezone.utc).isoformat(),
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _fail(message: str, code: int = EXIT_USAGE) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise RaceImputeError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise RaceImputeError(f"{what} not found: {p}")
    return p


def _load_json_config(path: str | None) -> dict:
    if not path:
        return {}
    p = _require_file(path, "config file")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RaceImputeError(f"bad JSON config {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise RaceImputeError(f"config {p} must be a JSON object")
    return data


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = _utcnow()
    overrides = _load_json_config(args.config)
    if "prevalences" in overrides:
        overrides["prevalences"] = RaceDistribution.from_probs(overrides["prevalences"], normalize=True)
    for key in ("first_len", "last_len"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    if args.records is not None:
        overrides["n_records"] = args.records
    if args.tracts is not None:
        overrides["n_tracts"] = args.tracts
    if args.estimated_tables:
        overrides["exact_tables"] = False
    config = synth.benchmark_config(mode=args.mode, seed=args.seed, **overrides)
    dataset = synth.generate(config)
    out_dir = Path(args.out_dir)
    paths = synth.write_dataset(dataset, out_dir)
    cfg_dict = asdict(config)
    cfg_dict["prevalences"] = list(config.prevalences.p)
    _write_manifest(
        out_dir / "manifest.json",
        "synth",
        vars(args),
        args.seed,
        [],
        sorted(paths.values()),
        _hash_config(cfg_dict),
        started,
    )
    print(f"wrote {len(dataset.records)} records across {config.n_tracts} tracts to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_data_dir(data_dir: str, race_map_path: str | None):
    base = Path(data_dir)
    records_path = _require_file(str(base / "records.csv"), "records.csv")
    tracts_path = _require_file(str(base / "tracts.csv"), "tracts.csv")
    race_map = load_race_map(race_map_path) if race_map_path else None
    records = load_person_records(records_path, race_map=race_map, require_labels=True)
    tracts = load_tract_table(tracts_path)
    return records, tracts, [records_path, tracts_path]


def _lstm_config(args, overrides: dict, geo_enabled: bool) -> lstm.LstmGeoConfig:
    params = dict(overrides)
    params["geo_enabled"] = geo_enabled
    params["seed"] = args.seed
    if args.max_epochs is not None:
        params["max_epochs"] = args.max_epochs
    return lstm.LstmGeoConfig(**params)


def _write_train_log(log, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for entry in log:
            writer.writerow(
                [entry.epoch, repr(entry.train_loss), "" if entry.val_loss is None else repr(entry.val_loss)]
            )


def cmd_train(args) -> int:
    started = _utcnow()
    overrides = _load_json_config(args.config)
    records, tracts, inputs = _load_data_dir(args.data_dir, args.race_map)
    split = stratified_split(records, seed=args.seed)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    outputs = [out_path]
    if args.model in ("lstm", "lstm-geo"):
        config = _lstm_config(args, overrides, geo_enabled=args.model == "lstm-geo")
        if config.max_epochs == 0:
            print("warning: --max-epochs 0 writes an untrained (initialized) model", file=sys.stderr)
        try:
            model, log = lstm.train(config, split, tracts)
        except NonFiniteLoss as exc:
            return _fail(f"training diverged: {exc} (see log for last finite epoch)", EXIT_NUMERIC)
        lstm.save_model(model, out_path)
        log_path = Path(args.log) if args.log else out_path.with_suffix(".log.csv")
        _write_train_log(log, log_path)
        outputs.append(log_path)
        config_hash = _hash_config(asdict(config))
        for entry in log:
            val = "" if entry.val_loss is None else f" val={entry.val_loss:.6f}"
            print(f"epoch {entry.epoch}: train={entry.train_loss:.6f}{val} ({entry.seconds:.1f}s)")
    elif args.model == "xgb-filter":
        if not args.base_model:
            return _fail("--model xgb-filter requires --base-model (a trained lstm-geo model)")
        base_path = _require_file(args.base_model, "base model")
        inputs.append(base_path)
        base = lstm.load_model(base_path)
        fit_records = split.validation if split.validation else split.train
        pred = lstm.predict_batch(base, fit_records, tracts)
        X = gbdt.build_filter_matrix(pred.distributions, fit_records, tracts)
        y = [r.label for r in fit_records]
        cfg = gbdt.GbdtConfig(**{**overrides, "seed": args.seed})
        if args.grid_search:
            hold = split.holdout if split.holdout else fit_records
            hold_pred = lstm.predict_batch(base, hold, tracts)
            Xh = gbdt.build_filter_matrix(hold_pred.distributions, hold, tracts)
            yh = [r.label for r in hold]
            model, cfg, _ = gbdt.fit_with_grid_search(X, y, Xh, yh, seed=args.seed)
        else:
            model = gbdt.fit(X, y, cfg)
        gbdt.save_gbdt(model, out_path)
        config_hash = _hash_config(asdict(cfg))
        print("feature importance (total split gain):")
        for name, gain in gbdt.feature_importance(model):
            print(f"  {name}: {gain:.4f}")
    else:  # pragma: no cover - argparse restricts choices
        return _fail(f"unknown model {args.model}")
    _write_manifest(
        out_path.parent / f"{out_path.stem}.manifest.json",
        "train",
        vars(args),
        args.seed,
        inputs,
        outputs,
        config_hash,
        started,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# impute
# ---------------------------------------------------------------------------


def _write_predictions(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["row_id", *PROB_COLUMNS, "predicted_class", "flags"])
        for row in rows:
            dist: RaceDistribution = row["dist"]
            writer.writerow(
                [
                    row["row_id"],
                    *[repr(v) for v in dist.p],
                    dist.argmax().canonical(),
                    ";".join(row["flags"]),
                ]
            )


def _impute_bayes(records, args, use_first: bool) -> list[dict]:
    tracts = load_tract_table(_require_file(args.tracts, "--tracts table"))
    marginal = load_marginal(_require_file(args.marginal, "--marginal table"))
    surname_table = load_name_prior_table(_require_file(args.surnames, "--surnames table"), "surname", marginal)
    firstname_table = None
    if use_first:
        firstname_table = load_name_prior_table(
            _require_file(args.firstnames, "--firstnames table"), "firstname", marginal
        )
    rows = []
    for record in records:
        inputs, imputed_geo = bayes.build_bayes_inputs(record, surname_table, tracts, marginal, firstname_table)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegeneratePosteriorWarning)
            dist = bayes.bifsg_posterior(inputs) if use_first else bayes.bisg_posterior(inputs)
        flags = []
        if imputed_geo:
            flags.append("imputed_geo")
        if any(issubclass(w.category, DegeneratePosteriorWarning) for w in caught):
            flags.append("degenerate_posterior")
        rows.append({"row_id": record.row_id, "dist": dist, "flags": flags})
    return rows


def _impute_lstm(records, args) -> list[dict]:
    tracts = load_tract_table(_require_file(args.tracts, "--tracts table"))
    model = lstm.load_model(_require_file(args.model_file, "--model-file"))
    pred = lstm.predict_batch(model, records, tracts)
    return [
        {"row_id": r.row_id, "dist": d, "flags": (["imputed_geo"] if flag else [])}
        for r, d, flag in zip(records, pred.distributions, pred.imputed_geo)
    ]


def _impute_filtered(records, args) -> list[dict]:
    tracts = load_tract_table(_require_file(args.tracts, "--tracts table"))
    base = lstm.load_model(_require_file(args.base_model, "--base-model"))
    filt = gbdt.load_gbdt(_require_file(args.model_file, "--model-file"))
    pred = lstm.predict_batch(base, records, tracts)
    X = gbdt.build_filter_matrix(pred.distributions, records, tracts)
    probs = gbdt.predict_proba(filt, X)
    return [
        {
            "row_id": r.row_id,
            "dist": RaceDistribution.from_probs(p),
            "flags": (["imputed_geo"] if flag else []),
        }
        for r, p, flag in zip(records, probs, pred.imputed_geo)
    ]


def cmd_impute(args) -> int:
    started = _utcnow()
    input_path = _require_file(args.input, "--input records")
    records = load_person_records(input_path, race_map=load_race_map(args.race_map) if args.race_map else None)
    if args.model == "bisg":
        rows = _impute_bayes(records, args, use_first=False)
    elif args.model == "bifsg":
        rows = _impute_bayes(records, args, use_first=True)
    elif args.model in ("lstm", "lstm-geo"):
        rows = _impute_lstm(records, args)
    elif args.model == "lstm-geo-xgb":
        rows = _impute_filtered(records, args)
    else:  # pragma: no cover
        return _fail(f"unknown model {args.model}")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_predictions(out_path, rows)
    inputs = [input_path] + [Path(p) for p in (args.tracts, args.surnames, args.firstnames, args.marginal, args.model_file, args.base_model) if p]
    _write_manifest(
        out_path.parent / f"{out_path.stem}.manifest.json",
        "impute",
        vars(args),
        None,
        [p for p in inputs if Path(p).exists()],
        [out_path],
        _hash_config({"model": args.model}),
        started,
    )
    print(f"imputed {len(rows)} rows with {args.model} -> {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _load_predictions(path: Path) -> dict[str, RaceClass]:
    preds = {}
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            preds[row["row_id"]] = RaceClass.parse(row["predicted_class"])
    return preds


def cmd_evaluate(args) -> int:
    started = _utcnow()
    data_path = _require_file(args.data, "--data records")
    records = load_person_records(data_path, race_map=load_race_map(args.race_map) if args.race_map else None, require_labels=True)
    tracts = load_tract_table(_require_file(args.tracts, "--tracts table"))
    if args.bin_edges:
        edges = [float(v) for v in args.bin_edges.split(",")]
    else:
        edges = metrics.default_income_bin_edges(tracts)
    named_preds = {}
    inputs = [data_path, Path(args.tracts)]
    for spec_arg in args.pred:
        if "=" not in spec_arg:
            return _fail(f"--pred expects name=path, got {spec_arg!r}")
        name, path = spec_arg.split("=", 1)
        pred_path = _require_file(path, f"predictions for {name}")
        inputs.append(pred_path)
        named_preds[name] = _load_predictions(pred_path)
    reports = {}
    for name, preds in named_preds.items():
        missing = [r.row_id for r in records if r.row_id not in preds]
        if missing:
            return _fail(f"{name}: {len(missing)} rows have no prediction (first: {missing[0]})")
        pred_list = [preds[r.row_id] for r in records]
        label_list = [r.label for r in records]
        cm = metrics.confusion(pred_list, label_list)
        bias = metrics.income_bias_table(list(zip(records, pred_list)), tracts, edges)
        reports[name] = metrics.ModelEvalReport(cm, metrics.aggregate_metrics(cm), bias)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = metrics.emit_report(
        reports,
        out_dir,
        dataset_fingerprint={"records": len(records), "path": str(data_path)},
        config_hashes={"bin_edges": _hash_config(edges)},
        artifact_version=ARTIFACT_VERSION,
    )
    comparison = out_dir / "comparison.csv"
    with open(comparison, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["model", "accuracy", "f1", "precision", "recall", "fpr_macro", "fpr_weighted"])
        for name in sorted(reports):
            m = reports[name].metrics
            writer.writerow(
                [
                    name,
                    repr(m.accuracy),
                    repr(m.weighted_f1),
                    repr(m.weighted_precision),
                    repr(m.weighted_recall),
                    repr(m.macro_fpr),
                    repr(m.weighted_fpr),
                ]
            )
    written.append(comparison)
    _write_manifest(
        out_dir / "manifest.json",
        "evaluate",
        vars(args),
        None,
        inputs,
        sorted(written),
        _hash_config(edges),
        started,
    )
    for name in sorted(reports):
        m = reports[name].metrics
        print(
            f"{name}: accuracy={m.accuracy:.4f} f1={m.weighted_f1:.4f} "
            f"fpr_macro={m.macro_fpr:.4f} white_fpr={m.per_class['white'].fpr:.4f}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# geocode
# ---------------------------------------------------------------------------


def cmd_geocode(args) -> int:
    started = _utcnow()
    input_path = _require_file(args.input, "--input addresses")
    offline = args.offline or os.environ.get("RACEIMPUTE_OFFLINE", "") == "1"
    client = CensusGeocoderClient(cache_path=args.cache, offline=offline)
    with open(input_path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if "address" not in (reader.fieldnames or []):
            return _fail(f"{input_path}: missing 'address' column")
        in_rows = list(reader)
        fieldnames = list(reader.fieldnames)
    results = client.geocode_batch([row["address"] for row in in_rows], concurrency_limit=args.concurrency)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([*fieldnames, "tract_geoid", "matched", "quality", "source"])
        for row, res in zip(in_rows, results):
            writer.writerow([*[row[c] for c in fieldnames], res.geoid or "", int(res.matched), res.quality, res.source])
    unmatched = sum(1 for r in results if not r.matched)
    _write_manifest(
        out_path.parent / f"{out_path.stem}.manifest.json",
        "geocode",
        vars(args),
        None,
        [input_path],
        [out_path],
        _hash_config({"offline": offline}),
        started,
    )
    print(f"geocoded {len(results)} addresses ({unmatched} unmatched) -> {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    modes = ("concat", "prefix") if args.geo_mode == "both" else (args.geo_mode,)
    worst = 0.0
    for mode in modes:
        config = lstm.micro_config(geo_enabled=True, geo_mode=mode, seed=args.seed)
        report = lstm.grad_check(config, seed=args.seed, epsilon=args.epsilon)
        status = "ok" if report.passed(args.threshold) else "FAIL"
        print(
            f"geo_mode={mode}: max relative error {report.max_rel_error:.3e} "
            f"at {report.worst_param} [{status}]"
        )
        worst = max(worst, report.max_rel_error)
    if worst < args.threshold:
        print(f"gradcheck passed: {worst:.3e} < {args.threshold:.1e}")
        return EXIT_OK
    print(f"gradcheck FAILED: {worst:.3e} >= {args.threshold:.1e}", file=sys.stderr)
    return EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raceimpute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--mode", choices=(synth.INDEPENDENT, synth.SES_CONFOUNDED), default=synth.INDEPENDENT)
    p.add_argument("--records", type=int, default=None)
    p.add_argument("--tracts", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with generator field overrides")
    p.add_argument("--estimated-tables", action="store_true", help="emit sample-estimated name tables")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--model", choices=("lstm", "lstm-geo", "xgb-filter"), required=True)
    p.add_argument("--data-dir", required=True, help="directory with records.csv and tracts.csv")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON file with config field overrides")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--base-model", default=None, help="trained lstm-geo model (xgb-filter only)")
    p.add_argument("--grid-search", action="store_true", help="small deterministic hyperparameter grid (xgb-filter)")
    p.add_argument("--log", default=None, help="training log CSV path")
    p.add_argument("--race-map", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="score records with a chosen model")
    p.add_argument("--model", choices=("bisg", "bifsg", "lstm", "lstm-geo", "lstm-geo-xgb"), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tracts", default=None)
    p.add_argument("--surnames", default=None)
    p.add_argument("--firstnames", default=None)
    p.add_argument("--marginal", default=None)
    p.add_argument("--model-file", default=None)
    p.add_argument("--base-model", default=None)
    p.add_argument("--race-map", default=None)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("evaluate", help="score prediction files against labels")
    p.add_argument("--pred", action="append", required=True, help="name=predictions.csv (repeatable)")
    p.add_argument("--data", required=True, help="labeled records CSV")
    p.add_argument("--tracts", required=True)
    p.add_argument("--bin-edges", default=None, help="comma-separated income thresholds (USD)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--race-map", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("geocode", help="resolve addresses to tract GEOIDs")
    p.add_argument("--input", required=True, help="CSV with an 'address' column")
    p.add_argument("--out", required=True)
    p.add_argument("--cache", default=None, help="JSONL cache file")
    p.add_argument("--offline", action="store_true")
    p.add_argument("--concurrency", type=int, default=4)
    p.set_defaults(func=cmd_geocode)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--geo-mode", choices=("concat", "prefix", "both"), default="both")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except RaceImputeError as exc:
        return _fail(str(exc), EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
