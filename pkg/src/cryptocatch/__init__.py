"""Two-stage detection of encrypted cryptomining traffic."""
from cryptocatch.blacklist import BlacklistEntry, BlacklistStore
from cryptocatch.boosting import BoostedEnsemble, BoostedTreeClassifier, Hyperparams, cross_validate
from cryptocatch.features import FeatureSpec, FeatureVector, WindowFeatureExtractor, default_catalog, extract
from cryptocatch.flows import FlowKey, PacketRecord, Window, parse_records, segment_flows
from cryptocatch.metrics import pick_threshold, sweep_thresholds
from cryptocatch.pipeline import DetectionReport, PipelineConfig, detect
from cryptocatch.probe import Outcome, ProbeConfig, ProbeTarget, ProbeVerdict, ProtocolVariant, probe_batch, probe_one
from cryptocatch.selection import SignificanceSelector, benjamini_hochberg, select_features

__version__ = "0.1.0"

__all__ = [
    "BlacklistEntry", "BlacklistStore", "BoostedEnsemble", "BoostedTreeClassifier", "DetectionReport",
    "FeatureSpec", "FeatureVector", "FlowKey", "Hyperparams", "Outcome", "PacketRecord", "PipelineConfig",
    "ProbeConfig", "ProbeTarget", "ProbeVerdict", "ProtocolVariant", "SignificanceSelector", "Window",
    "WindowFeatureExtractor", "benjamini_hochberg", "cross_validate", "default_catalog", "detect", "extract",
    "parse_records", "pick_threshold", "probe_batch", "probe_one", "segment_flows", "select_features",
    "sweep_thresholds",
]
