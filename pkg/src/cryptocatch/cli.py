"""Command-line entry point.

Exit codes: 0 clean run, 1 usage error, 2 data error, 3 probe stage partly
failed (the report is still written).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
import time

import numpy as np
import pandas as pd

from cryptocatch import metrics
from cryptocatch.blacklist import BlacklistIOError, BlacklistStore
from cryptocatch.boosting import BoostedTreeClassifier, Hyperparams, feature_importance
from cryptocatch.features.catalog import default_catalog, feature_frame, read_matrix, read_spec_file, write_matrix
from cryptocatch.flows import BENIGN, MINING, RecordError, parse_records, read_labels, read_windows, segment_flows, write_windows
from cryptocatch.pipeline import FeatureMismatchError, PipelineConfig, detect
from cryptocatch.probe import ALL_VARIANTS, DEFAULT_TRANSPORTS, Outcome, ProbeConfig, ProtocolVariant, Transport, probe_batch, read_targets
from cryptocatch.selection import significance_report

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("cryptocatch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


def _positive(labels) -> np.ndarray:
    """Truth vector: anything other than ``benign`` (or 0/false) is mining."""
    s = pd.Series(labels).astype(str).str.strip().str.lower()
    return ~s.isin([BENIGN, "0", "false", ""]).to_numpy()


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(args.config) if args.config else PipelineConfig()


# ---- subcommands ----


def cmd_ingest(args) -> int:
    cfg = _config(args)
    window_size = args.window_size or cfg.window_size
    flow_timeout = args.flow_timeout or cfg.flow_timeout
    records, errors = [], 0
    for path in args.files:
        with open(path, encoding="utf-8", newline="") as fh:
            result = parse_records(fh, args.format, strict=args.strict)
        records.extend(result.records)
        errors += result.error_count
        for line, msg in result.errors[:5]:
            log.warning("%s:%d: %s", path, line, msg)
    labels = None
    if args.labels:
        with open(args.labels, encoding="utf-8", newline="") as fh:
            labels = read_labels(fh)
    windows = segment_flows(records, window_size, flow_timeout, labels)
    with _output(args.out) as fh:
        write_windows(windows, fh)
    print(f"records={len(records)} rejected={errors} windows={len(windows)}", file=sys.stderr)
    return EXIT_DATA if errors and not records else EXIT_OK


def cmd_features(args) -> int:
    if args.list_specs:
        for spec in default_catalog():
            print(spec.name)
        return EXIT_OK
    if not args.windows:
        raise UsageError("a windows file is required unless --list-specs is given")
    specs = "default" if args.specs == "default" else read_spec_file(args.specs)
    with open(args.windows, encoding="utf-8") as fh:
        windows = read_windows(fh)
    frame = feature_frame(windows, specs)
    if args.out in (None, "-"):
        frame.to_csv(sys.stdout, index=False, float_format="%.17g")
    else:
        write_matrix(frame, args.out)
    return EXIT_OK


def cmd_select(args) -> int:
    X, y, _ = read_matrix(args.matrix)
    if y is None:
        raise ValueError("feature matrix has no label column")
    labels = np.where(_positive(y), MINING, BENIGN) if args.binary else y.to_numpy()
    report = significance_report(X.to_numpy(), labels, args.alpha, list(X.columns))
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
            report.to_csv(fh)
    with _output(args.out) as fh:
        for name, keep in zip(report.names, report.selected):
            if keep:
                fh.write(f"{name}\n")
    print(f"selected {int(np.sum(report.selected))} of {len(report.names)} features", file=sys.stderr)
    return EXIT_OK


def _read_names(path) -> list[str]:
    return [s.name for s in read_spec_file(path)]


def cmd_train(args) -> int:
    X, y, _ = read_matrix(args.matrix)
    if y is None:
        raise ValueError("feature matrix has no label column")
    hp = Hyperparams()
    if args.hp:
        with open(args.hp, encoding="utf-8") as fh:
            hp = Hyperparams.from_dict(json.load(fh))
    if args.features:
        names = _read_names(args.features)
        missing = [n for n in names if n not in X.columns]
        if missing:
            raise ValueError(f"matrix lacks selected features {missing[:5]}")
        X = X[names]
    if args.task == "binary":
        labels = np.where(_positive(y), MINING, BENIGN)
    else:
        labels = y.to_numpy()
    if np.unique(labels).size < 2:
        raise ValueError("training needs at least two classes")
    model = BoostedTreeClassifier.from_hyperparams(hp).fit(X, labels)
    if args.task == "binary" and model.task_ != "binary":
        raise ValueError("binary task produced a multiclass model")
    model.save(args.out)
    top = ", ".join(f"{n}={s:.3f}" for n, s in feature_importance(model)[:10])
    print(f"trained {model.task_} model, final loss {model.train_loss_[-1]:.4f}; top: {top}", file=sys.stderr)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = BoostedTreeClassifier.load(args.model)
    X, y, ids = read_matrix(args.matrix)
    missing = [n for n in model.feature_names_ if n not in X.columns]
    if missing:
        raise FeatureMismatchError(f"matrix lacks model features {missing[:5]}")
    proba = model.predict_proba(X[model.feature_names_].to_numpy())
    classes = [str(c) for c in model.classes_]
    out = pd.DataFrame({"window_id": ids})
    if model.task_ == "binary":
        out["score"] = proba[:, 1]
    else:
        for k, c in enumerate(classes):
            out[f"p_{c}"] = proba[:, k]
        if BENIGN in classes:
            out["score"] = 1.0 - proba[:, classes.index(BENIGN)]
    out["label"] = np.asarray(classes)[np.argmax(proba, axis=1)]
    if y is not None:
        out["truth"] = y.to_numpy()
    with _output(args.out) as fh:
        out.to_csv(fh, index=False, float_format="%.17g", lineterminator="\n")
    return EXIT_OK


def _scores_and_truth(path):
    frame = pd.read_csv(path, dtype={"truth": str, "window_id": str}, keep_default_na=False)
    if "score" not in frame.columns or "truth" not in frame.columns:
        raise ValueError("scores file needs score and truth columns")
    return frame["score"].to_numpy(float), _positive(frame["truth"])


def cmd_evaluate(args) -> int:
    scores, truth = _scores_and_truth(args.scores)
    prf = metrics.confusion_and_prf(scores, truth, args.threshold)
    result = {"threshold": args.threshold, **prf.as_dict()}
    if 0 < truth.sum() < truth.size:
        roc = metrics.roc_auc(scores, truth)
        result["auc"] = roc.auc
        if args.roc:
            roc.to_frame().to_csv(args.roc, index=False, float_format="%.17g", lineterminator="\n")
    if args.confusion:
        with open(args.confusion, "w", encoding="utf-8", newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["actual", "predicted_mining", "predicted_benign"])
            w.writerow(["mining", prf.tp, prf.fn])
            w.writerow(["benign", prf.fp, prf.tn])
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_tune(args) -> int:
    scores, truth = _scores_and_truth(args.scores)
    table = metrics.sweep_thresholds(scores, truth, args.step)
    policy = metrics.pick_threshold(table, args.policy, args.floor)
    if args.table:
        table.to_csv(args.table, index=False, float_format="%.17g", lineterminator="\n")
    report = {"policy": policy.kind, "threshold": policy.threshold, "precision": policy.precision,
              "recall": policy.recall, "f1": policy.f1, "max_f1": policy.max_f1,
              "f1_floor_ratio": policy.f1_floor_ratio, "table": args.table}
    with _output(args.out) as fh:
        fh.write(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args)
    overrides = {
        "model_path": args.model, "threshold": args.threshold, "journal": args.journal,
        "update_mode": args.update_mode, "min_positive_windows": args.min_positive_windows,
    }
    data = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_probe:
        data["probe_enabled"] = False
    cfg = PipelineConfig(**data)
    cfg.check_files()
    records = []
    for path in args.records:
        with open(path, encoding="utf-8", newline="") as fh:
            records.extend(parse_records(fh, args.format).records)
    labels = None
    if args.labels:
        with open(args.labels, encoding="utf-8", newline="") as fh:
            labels = read_labels(fh)
    report = detect(records, cfg, labels=labels)
    if args.scores:
        with open(args.scores, "w", encoding="utf-8", newline="\n") as fh:
            report.write_scores(fh)
    with _output(args.out) as fh:
        fh.write(json.dumps(report.to_dict(), indent=2) + "\n")
    for err in report.errors:
        log.error("%s", err)
    return EXIT_PARTIAL if report.partial_failure else EXIT_OK


def cmd_probe(args) -> int:
    config = ProbeConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
        config = ProbeConfig.from_dict(doc.get("probe", doc))
    transports = DEFAULT_TRANSPORTS + ((Transport.HTTP,) if args.http else ())
    with open(args.targets, encoding="utf-8") as fh:
        targets = read_targets(fh, transports)
    variants = tuple(ProtocolVariant.parse(v) for v in args.variants.split(",")) if args.variants else ALL_VARIANTS
    failures = 0
    verdicts = []
    try:
        verdicts = probe_batch(targets, variants, config)
    except Exception as exc:  # report what we can
        log.error("probe batch failed: %s", exc)
        failures += 1
    with _output(args.out) as fh:
        for v in verdicts:
            fh.write(json.dumps(v.to_dict(), separators=(",", ":")) + "\n")
    if args.journal:
        store = BlacklistStore(args.journal)
        for v in verdicts:
            try:
                store.confirm(v)
            except BlacklistIOError as exc:
                log.error("%s", exc)
                failures += 1
    counts = {o.value: sum(v.outcome is o for v in verdicts) for o in Outcome}
    print(json.dumps(counts), file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_blacklist(args) -> int:
    store = BlacklistStore(args.journal)
    if args.action == "show":
        with _output(args.out) as fh:
            for e in store.entries():
                fh.write(e.to_json() + "\n")
    elif args.action == "export":
        with _output(args.out) as fh:
            fh.write(store.export(args.max_age))
    else:
        n = store.compact()
        print(f"compacted to {n} entries", file=sys.stderr)
    return EXIT_OK


def cmd_sim_pool(args) -> int:
    from cryptocatch.sim.pool import PoolBehavior, serve_pool

    server = serve_pool(ProtocolVariant.parse(args.variant), PoolBehavior.parse(args.behavior),
                        (args.bind, args.port), tls=args.tls)
    print(f"listening on {server.endpoint}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_sim_traffic(args) -> int:
    from cryptocatch.sim.traffic import SynthProfile, synthesize, synthesize_mixed

    if args.flows < 1:
        raise UsageError("--flows must be >= 1")
    if args.profile == "mixed":
        corpus = synthesize_mixed(args.flows, args.flows, seed=args.seed)
    else:
        corpus = synthesize(SynthProfile(args.profile, seed=args.seed), args.flows)
    corpus.write(args.out, args.labels)
    print(f"wrote {len(corpus.records)} records in {len(corpus.labels)} flows", file=sys.stderr)
    return EXIT_OK


# ---- parser ----


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cryptocatch", description="Encrypted cryptomining traffic detection")
    p.add_argument("--config", help="pipeline configuration JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    # --config is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="pipeline configuration JSON")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="parse packet records into windows")
    s.add_argument("--format", choices=("ndjson", "csv"), default="ndjson")
    s.add_argument("--window-size", type=int)
    s.add_argument("--flow-timeout", type=float)
    s.add_argument("--labels", help="flow labels CSV")
    s.add_argument("--strict", action="store_true", help="fail on the first bad record")
    s.add_argument("--out", default="-")
    s.add_argument("files", nargs="+")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("features", parents=[common], help="compute the feature matrix")
    s.add_argument("--specs", default="default", help="'default' or a file of feature names")
    s.add_argument("--out", default="-")
    s.add_argument("--list-specs", action="store_true")
    s.add_argument("windows", nargs="?")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("select", parents=[common], help="significance-based feature selection")
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--out", default="-")
    s.add_argument("--report", help="per-feature CSV report")
    s.add_argument("--binary", action="store_true", help="collapse coin labels to mining vs benign")
    s.add_argument("matrix")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("train", parents=[common], help="train a boosted-tree model")
    s.add_argument("--task", choices=("binary", "multiclass"), default="binary")
    s.add_argument("--hp", help="hyperparameter JSON")
    s.add_argument("--features", help="file of feature names to use")
    s.add_argument("--out", required=True)
    s.add_argument("matrix")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="score a feature matrix")
    s.add_argument("--model", required=True)
    s.add_argument("--out", default="-")
    s.add_argument("matrix")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="confusion matrix and ROC for a scores file")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--confusion")
    s.add_argument("--roc")
    s.add_argument("scores")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("tune-threshold", parents=[common], help="choose a decision threshold")
    s.add_argument("--policy", choices=("f1", "sensitivity"), default="f1")
    s.add_argument("--floor", type=float, default=0.99)
    s.add_argument("--step", type=float, default=0.01)
    s.add_argument("--table")
    s.add_argument("--out", default="-")
    s.add_argument("scores")
    s.set_defaults(func=cmd_tune)

    s = sub.add_parser("detect", parents=[common], help="run both detection stages")
    s.add_argument("--model")
    s.add_argument("--threshold", type=float)
    s.add_argument("--journal")
    s.add_argument("--update-mode", choices=("realtime", "batch"))
    s.add_argument("--min-positive-windows", type=int)
    s.add_argument("--no-probe", action="store_true")
    s.add_argument("--format", choices=("ndjson", "csv"), default="ndjson")
    s.add_argument("--labels")
    s.add_argument("--scores", help="per-window scores CSV")
    s.add_argument("--out", default="-")
    s.add_argument("records", nargs="+")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("probe", parents=[common], help="actively probe host:port targets")
    s.add_argument("--targets", required=True)
    s.add_argument("--out", default="-")
    s.add_argument("--variants", help="comma-separated subset, e.g. btc,xmr")
    s.add_argument("--http", action="store_true", help="also try JSON-RPC over HTTP POST")
    s.add_argument("--journal", help="record positives in this blacklist")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("blacklist", parents=[common], help="inspect or maintain the blacklist")
    s.add_argument("action", choices=("show", "export", "compact"))
    s.add_argument("--journal", required=True)
    s.add_argument("--max-age")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_blacklist)

    sim = sub.add_parser("sim", parents=[common], help="simulators")
    simsub = sim.add_subparsers(dest="sim_command", required=True, parser_class=_Parser)
    s = simsub.add_parser("pool", parents=[common], help="run an emulated mining pool")
    s.add_argument("--variant", required=True, choices=("btc", "xmr", "eth", "webmine"))
    s.add_argument("--behavior", default="success")
    s.add_argument("--bind", default="127.0.0.1")
    s.add_argument("--port", type=int, default=0)
    s.add_argument("--tls", action="store_true")
    s.set_defaults(func=cmd_sim_pool)
    s = simsub.add_parser("traffic", parents=[common], help="generate a synthetic labelled corpus")
    s.add_argument("--profile", choices=("mining", "benign", "mixed"), required=True)
    s.add_argument("--flows", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--labels")
    s.set_defaults(func=cmd_sim_traffic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cryptocatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, RecordError, json.JSONDecodeError, pd.errors.ParserError) as exc:
        print(f"cryptocatch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
