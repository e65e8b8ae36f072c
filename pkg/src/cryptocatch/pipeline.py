"""Two-stage detection: classify flow windows, then probe suspicious endpoints.

Stage 1 scores every window and thresholds the score. Windows that pass are
grouped by destination ``host:port``; endpoints with enough positive windows
become suspicious. Stage 2 probes suspicious endpoints that are not already
blacklisted and records pool-positive verdicts in the blacklist store.
"""
from __future__ import annotations

import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from cryptocatch.blacklist import BlacklistIOError, BlacklistStore, format_endpoint
from cryptocatch.boosting import BoostedTreeClassifier
from cryptocatch.features.catalog import extract_values, read_spec_file, resolve_specs
from cryptocatch.flows import BENIGN, FlowKey, PacketRecord, Window, segment_flows
from cryptocatch.probe import ALL_VARIANTS, Outcome, ProbeConfig, ProbeTarget, ProbeVerdict, ProtocolVariant, probe_one

log = logging.getLogger(__name__)

THRESHOLD_POLICIES = ("fixed", "optimal_f1", "sensitivity")


class FeatureMismatchError(ValueError):
    """The model's feature names cannot be produced by the configured catalog."""


@dataclass
class PipelineConfig:
    window_size: int = 10
    flow_timeout: float = 120.0
    specs: str | list = "default"
    model_path: str | None = None
    threshold_policy: str = "fixed"
    threshold: float = 0.5
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    variants: tuple = ALL_VARIANTS
    journal: str | None = None
    update_mode: str = "realtime"
    min_positive_windows: int = 1
    probe_enabled: bool = True

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be at least 2")
        if self.flow_timeout <= 0:
            raise ValueError("flow_timeout must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.threshold_policy not in THRESHOLD_POLICIES:
            raise ValueError(f"threshold_policy must be one of {THRESHOLD_POLICIES}")
        if self.update_mode not in ("realtime", "batch"):
            raise ValueError("update_mode must be realtime or batch")
        if self.min_positive_windows < 1:
            raise ValueError("min_positive_windows must be >= 1")
        self.variants = tuple(ProtocolVariant.parse(v) if isinstance(v, str) else v for v in self.variants)

    def check_files(self) -> None:
        """Raise if a referenced input file is missing or unreadable."""
        paths = [self.model_path]
        if isinstance(self.specs, str) and self.specs != "default":
            paths.append(self.specs)
        for p in paths:
            if p is not None and not os.access(p, os.R_OK):
                raise FileNotFoundError(f"cannot read {p}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        if isinstance(data.get("probe"), Mapping):
            data["probe"] = ProbeConfig.from_dict(data["probe"])
        if "variants" in data:
            data["variants"] = tuple(data["variants"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class WindowScore:
    window_id: str
    endpoint: tuple[str, int]
    score: float
    positive: bool
    label: str | None = None


@dataclass
class DetectionReport:
    threshold: float
    windows: list[WindowScore] = field(default_factory=list)
    suspicious: dict[tuple[str, int], int] = field(default_factory=dict)
    verdicts: list[ProbeVerdict] = field(default_factory=list)
    cached: list[tuple[str, int]] = field(default_factory=list)
    confirmed: list[tuple[str, int]] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    endpoint_labels: dict[tuple[str, int], bool] | None = None

    @property
    def probed(self) -> list[tuple[str, int]]:
        return [v.endpoint for v in self.verdicts]

    @property
    def partial_failure(self) -> bool:
        return bool(self.errors)

    def summary(self) -> dict:
        out = {
            "windows": len(self.windows),
            "positive_windows": sum(w.positive for w in self.windows),
            "suspicious_endpoints": len(self.suspicious),
            "probed": len(self.verdicts),
            "blacklist_hits": len(self.cached),
            "confirmed": len(self.confirmed),
            "outcomes": dict(Counter(v.outcome.value for v in self.verdicts)),
            "errors": len(self.errors),
        }
        if self.endpoint_labels is not None:
            mining = self.endpoint_labels
            labelled = [w for w in self.windows if w.label is not None]
            truth = np.array([w.label != BENIGN for w in labelled], dtype=bool)
            pred = np.array([w.positive for w in labelled], dtype=bool)
            out["window_confusion"] = {
                "tp": int(np.sum(truth & pred)), "fp": int(np.sum(~truth & pred)),
                "fn": int(np.sum(truth & ~pred)), "tn": int(np.sum(~truth & ~pred)),
            }
            out["classifier_fp_endpoints"] = sum(not mining.get(e, False) for e in self.suspicious)
            out["confirmed_tp"] = sum(mining.get(e, False) for e in self.confirmed)
            out["confirmed_fp"] = sum(not mining.get(e, False) for e in self.confirmed)
            out["missed_endpoints"] = sum(v and e not in self.confirmed for e, v in mining.items())
        return out

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "summary": self.summary(),
            "suspicious": [{"endpoint": format_endpoint(*e), "windows": n} for e, n in sorted(self.suspicious.items())],
            "verdicts": [v.to_dict() for v in self.verdicts],
            "blacklist_hits": [format_endpoint(*e) for e in self.cached],
            "confirmed": [format_endpoint(*e) for e in self.confirmed],
            "errors": list(self.errors),
        }

    def write_scores(self, fh) -> None:
        fh.write("window_id,endpoint,score,decision\n")
        for w in self.windows:
            fh.write(f"{w.window_id},{format_endpoint(*w.endpoint)},{w.score:.17g},{int(w.positive)}\n")


def model_specs(model: BoostedTreeClassifier, specs="default"):
    """Feature specs matching the model's inputs, in model column order."""
    names = list(model.feature_names_)
    try:
        resolved = resolve_specs(names)
    except (ValueError, KeyError) as exc:
        raise FeatureMismatchError(f"model features are not catalog features: {exc}") from exc
    if not (isinstance(specs, str) and specs == "default"):
        configured = read_spec_file(specs) if isinstance(specs, str) else resolve_specs(specs)
        available = {s.name for s in configured}
        missing = [n for n in names if n not in available]
        if missing:
            raise FeatureMismatchError(f"configured feature set lacks model features {missing[:5]}")
    return resolved


def window_scores(model: BoostedTreeClassifier, X: np.ndarray) -> np.ndarray:
    """Mining score per row: 1 - P(benign) when the model knows ``benign``."""
    proba = model.predict_proba(X)
    classes = [str(c) for c in model.classes_]
    if BENIGN in classes:
        return 1.0 - proba[:, classes.index(BENIGN)]
    return proba[:, -1]


def featurize(windows: Sequence[Window], specs) -> np.ndarray:
    out = np.empty((len(windows), len(specs)))
    for i, w in enumerate(windows):
        out[i] = extract_values(w, specs)
    return out


def _endpoint(key: FlowKey) -> tuple[str, int]:
    return key.dst_ip, key.dst_port


def _safe_probe(target, variants, config):
    try:
        return probe_one(target, variants, config), None
    except Exception as exc:  # a crashed probe must not lose the rest of the batch
        return None, f"probe {target.host}:{target.port} failed: {exc}"


def detect(records: Sequence[PacketRecord], config: PipelineConfig, model: BoostedTreeClassifier | None = None,
           store: BlacklistStore | None = None, labels: Mapping[FlowKey, str] | None = None,
           now=None) -> DetectionReport:
    """Run both stages on ``records`` and return the report.

    ``store`` defaults to the journal named in ``config`` (or none). Endpoints
    already in the store are confirmed without probing.
    """
    if model is None:
        if config.model_path is None:
            raise ValueError("no model given and config.model_path is unset")
        model = BoostedTreeClassifier.load(config.model_path)
    specs = model_specs(model, config.specs)
    if store is None and config.journal is not None:
        store = BlacklistStore(config.journal, mode=config.update_mode)

    # Stage 1: complete before any probing starts
    windows = segment_flows(records, config.window_size, config.flow_timeout, labels)
    scores = window_scores(model, featurize(windows, specs)) if windows else np.empty(0)
    report = DetectionReport(config.threshold)
    hits: Counter = Counter()
    for w, s in zip(windows, scores):
        positive = bool(s > config.threshold)
        report.windows.append(WindowScore(w.window_id, _endpoint(w.key), float(s), positive, w.label))
        if positive:
            hits[_endpoint(w.key)] += 1
    report.suspicious = {e: n for e, n in sorted(hits.items()) if n >= config.min_positive_windows}
    if labels is not None:
        mining: dict[tuple[str, int], bool] = {}
        for key, lbl in labels.items():
            e = _endpoint(key)
            mining[e] = mining.get(e, False) or lbl != BENIGN
        report.endpoint_labels = mining

    # Stage 2
    to_probe = []
    for e in report.suspicious:
        if store is not None and e in store:
            report.cached.append(e)
        else:
            to_probe.append(ProbeTarget(*e))
    if config.probe_enabled and to_probe:
        workers = min(config.probe.max_parallel, len(to_probe))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: _safe_probe(t, config.variants, config.probe), to_probe))
        for verdict, error in results:
            if error:
                report.errors.append(error)
            else:
                report.verdicts.append(verdict)
    confirmed = set(report.cached)
    for v in report.verdicts:
        if v.outcome is Outcome.POSITIVE:
            confirmed.add(v.endpoint)
            if store is not None:
                try:
                    store.confirm(v, now)
                except BlacklistIOError as exc:
                    report.errors.append(str(exc))
    if store is not None and store.mode == "batch":
        try:
            store.maybe_flush(now)
        except BlacklistIOError as exc:
            report.errors.append(str(exc))
    report.confirmed = sorted(confirmed)
    return report
