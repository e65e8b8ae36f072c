"""Feature specs, canonical naming and window-level extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from cryptocatch.features import calculators as calc
from cryptocatch.flows import Window

IAT_SUFFIX = "iat"

# function id -> ordered parameter names
PARAMS: dict[str, tuple[str, ...]] = {
    "sum_values": (),
    "mean_n_absolute_max": ("n",),
    "c3": ("lag",),
    "binned_entropy": ("max_bins",),
    "index_mass_quantile": ("q",),
    "number_cwt_peaks": ("max_width",),
    "fft_coefficient": ("k", "attr"),
    "autocorrelation": ("lag",),
    "ar_coefficient": ("k", "order"),
    "friedrich_coefficients": ("coeff", "m", "r"),
    "max_langevin_fixed_point": ("m", "r"),
    "moving_average_last": ("w",),
    "sliding_std_max": ("w",),
    **{name: () for name in calc.BASIC_STATS},
}

_PARAM_TYPES = {
    "n": int, "lag": int, "max_bins": int, "q": float, "max_width": int, "k": int,
    "attr": str, "order": int, "coeff": int, "m": int, "r": int, "w": int,
}


@dataclass(frozen=True)
class FeatureSpec:
    function: str
    params: tuple[tuple[str, object], ...] = ()
    source: str = "len"  # "len" or "iat"

    def __post_init__(self):
        if self.function not in PARAMS:
            raise ValueError(f"unknown feature function {self.function!r}")
        if tuple(k for k, _ in self.params) != PARAMS[self.function]:
            raise ValueError(
                f"{self.function} takes parameters {PARAMS[self.function]}, "
                f"got {tuple(k for k, _ in self.params)}"
            )
        if self.source not in ("len", IAT_SUFFIX):
            raise ValueError(f"unknown source {self.source!r}")

    @classmethod
    def make(cls, function: str, source: str = "len", **params) -> "FeatureSpec":
        ordered = tuple((k, params[k]) for k in PARAMS.get(function, ()))
        return cls(function, ordered, source)

    @property
    def kwargs(self) -> dict:
        return dict(self.params)

    @property
    def name(self) -> str:
        parts = [self.function]
        parts += [f"{k}_{v}" for k, v in self.params]
        if self.source == IAT_SUFFIX:
            parts.append(IAT_SUFFIX)
        return "__".join(parts)

    @classmethod
    def from_name(cls, name: str) -> "FeatureSpec":
        parts = name.split("__")
        source = "len"
        if len(parts) > 1 and parts[-1] == IAT_SUFFIX:
            source = IAT_SUFFIX
            parts = parts[:-1]
        function, tokens = parts[0], parts[1:]
        if function not in PARAMS:
            raise ValueError(f"unknown feature function in {name!r}")
        expected = PARAMS[function]
        if len(tokens) != len(expected):
            raise ValueError(f"cannot parse feature name {name!r}")
        params = []
        for key, token in zip(expected, tokens):
            if not token.startswith(key + "_"):
                raise ValueError(f"expected parameter {key!r} in {name!r}")
            params.append((key, _PARAM_TYPES[key](token[len(key) + 1 :])))
        spec = cls(function, tuple(params), source)
        if spec.name != name:
            raise ValueError(f"non-canonical feature name {name!r}")
        return spec


def default_catalog() -> list[FeatureSpec]:
    """The default ~100-feature catalog (lengths, then inter-arrival times)."""
    base: list[FeatureSpec] = [FeatureSpec.make(s) for s in calc.BASIC_STATS]
    base += [FeatureSpec.make("moving_average_last", w=3), FeatureSpec.make("sliding_std_max", w=3)]
    base.append(FeatureSpec.make("sum_values"))
    base.append(FeatureSpec.make("mean_n_absolute_max", n=7))
    base += [FeatureSpec.make("c3", lag=lag) for lag in (1, 2, 3)]
    base.append(FeatureSpec.make("binned_entropy", max_bins=10))
    base += [FeatureSpec.make("index_mass_quantile", q=q) for q in (0.1, 0.5, 0.9)]
    base.append(FeatureSpec.make("number_cwt_peaks", max_width=5))
    base += [
        FeatureSpec.make("fft_coefficient", k=k, attr=attr)
        for k in range(5)
        for attr in calc.FFT_ATTRS
    ]
    base += [FeatureSpec.make("autocorrelation", lag=lag) for lag in (1, 2, 3)]
    base += [FeatureSpec.make("ar_coefficient", k=k, order=2) for k in range(3)]
    base += [FeatureSpec.make("friedrich_coefficients", coeff=c, m=3, r=30) for c in range(4)]
    base.append(FeatureSpec.make("max_langevin_fixed_point", m=3, r=30))
    iat = [FeatureSpec(s.function, s.params, IAT_SUFFIX) for s in base]
    return base + iat


def resolve_specs(specs) -> list[FeatureSpec]:
    """Accept ``"default"``, feature names, or FeatureSpec objects."""
    if specs is None or (isinstance(specs, str) and specs == "default"):
        return default_catalog()
    if isinstance(specs, str):
        raise ValueError(f"unknown spec set {specs!r}")
    out = [s if isinstance(s, FeatureSpec) else FeatureSpec.from_name(s) for s in specs]
    if not out:
        raise ValueError("at least one feature spec is required")
    names = [s.name for s in out]
    if len(set(names)) != len(names):
        raise ValueError("duplicate feature specs")
    return out


def read_spec_file(path) -> list[FeatureSpec]:
    with open(path, encoding="utf-8") as fh:
        names = [line.strip() for line in fh if line.strip() and not line.startswith("#")]
    return resolve_specs(names)


class _SeriesCache:
    """Memoizes the shared work (FFT, drift fit, summary stats) for one series."""

    def __init__(self, x: np.ndarray):
        self.x = x
        self._memo: dict = {}

    def get(self, key, fn):
        if key not in self._memo:
            self._memo[key] = fn()
        return self._memo[key]

    def evaluate(self, spec: FeatureSpec) -> float:
        x = self.x
        f, p = spec.function, spec.kwargs
        if f in calc.BASIC_STATS:
            return self.get("basic", lambda: calc.basic_stats(x))[f]
        if f in calc.ROLLING_STATS:
            return self.get(("rolling", p["w"]), lambda: calc.rolling_stats(x, p["w"]))[f]
        if f == "fft_coefficient":
            k = p["k"]
            if x.size == 0 or not 0 <= k <= x.size // 2:
                return calc.MISSING
            spectrum = self.get("fft", lambda: np.fft.fft(x))
            return calc._coefficient_attr(spectrum[k], p["attr"])
        if f == "friedrich_coefficients":
            coef, _ = self._drift(p["m"], p["r"])
            return float(coef[p["coeff"]]) if p["coeff"] < coef.size else calc.MISSING
        if f == "max_langevin_fixed_point":
            coef, xs = self._drift(p["m"], p["r"])
            if xs.size < p["m"] + 1:
                return calc.MISSING
            return calc.langevin_from_fit(coef, xs)
        if f == "ar_coefficient":
            coef = self.get(("ar", p["order"]), lambda: calc._ar_fit(x, p["order"]))
            return calc.MISSING if coef is None else float(coef[p["k"]])
        return getattr(calc, f)(x, **p)

    def _drift(self, m: int, r: int):
        def fit():
            xs, ys = calc.friedrich_bins(self.x, r)
            if xs.size < m + 1:
                return np.full(m + 1, calc.MISSING), xs
            return calc._drift_fit(xs, ys, m), xs

        return self.get(("drift", m, r), fit)


def _series(window: Window) -> dict[str, np.ndarray]:
    ts = np.fromiter((t for t, _ in window.packets), float, len(window.packets))
    ln = np.fromiter((n for _, n in window.packets), float, len(window.packets))
    return {"len": ln, IAT_SUFFIX: np.diff(ts)}


def extract_values(window: Window, specs: Sequence[FeatureSpec]) -> np.ndarray:
    """Feature values for one window, MISSING imputed as 0.0."""
    series = _series(window)
    caches = {src: _SeriesCache(arr) for src, arr in series.items()}
    out = np.empty(len(specs))
    with np.errstate(all="ignore"):
        for i, spec in enumerate(specs):
            if series[spec.source].size == 0:
                value = calc.MISSING
            else:
                value = caches[spec.source].evaluate(spec)
            out[i] = value if math.isfinite(value) else 0.0
    return out


@dataclass
class FeatureVector:
    window_id: str
    values: dict[str, float] = field(default_factory=dict)

    def as_array(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.values[n] for n in names], dtype=float)


def extract(window: Window, specs: Sequence[FeatureSpec] | str = "default") -> FeatureVector:
    specs = resolve_specs(specs)
    values = extract_values(window, specs)
    return FeatureVector(window.window_id, dict(zip((s.name for s in specs), values.tolist())))


class WindowFeatureExtractor(TransformerMixin, BaseEstimator):
    """Turn a sequence of :class:`Window` objects into a feature matrix.

    Parameters
    ----------
    specs : "default" or sequence of str / FeatureSpec
        Feature set to compute. Names use the canonical
        ``function__param_value`` form, with a trailing ``__iat`` for the
        inter-arrival-time variants.
    """

    def __init__(self, specs="default"):
        self.specs = specs

    def fit(self, X=None, y=None):
        self.specs_ = resolve_specs(self.specs)
        self.feature_names_in_ = None
        self.n_features_out_ = len(self.specs_)
        return self

    def transform(self, X: Iterable[Window]) -> np.ndarray:
        check_is_fitted(self, "specs_")
        windows = list(X)
        out = np.empty((len(windows), len(self.specs_)))
        for i, w in enumerate(windows):
            out[i] = extract_values(w, self.specs_)
        return out

    def get_feature_names_out(self, input_features=None) -> np.ndarray:
        check_is_fitted(self, "specs_")
        return np.array([s.name for s in self.specs_], dtype=object)


def feature_frame(windows: Sequence[Window], specs="default") -> pd.DataFrame:
    """Feature matrix as a DataFrame: ``window_id``, optional ``label``, features."""
    ext = WindowFeatureExtractor(specs).fit()
    values = ext.transform(windows)
    frame = pd.DataFrame(values, columns=list(ext.get_feature_names_out()))
    frame.insert(0, "window_id", [w.window_id for w in windows])
    if any(w.label is not None for w in windows):
        frame.insert(1, "label", [w.label for w in windows])
    return frame


def write_matrix(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g")


def read_matrix(path) -> tuple[pd.DataFrame, pd.Series | None, pd.Series]:
    """Read a feature-matrix CSV into (features, labels or None, window ids)."""
    frame = pd.read_csv(path, dtype={"window_id": str, "label": str}, keep_default_na=False)
    if "window_id" not in frame.columns:
        raise ValueError("feature matrix must start with a window_id column")
    ids = frame.pop("window_id")
    labels = frame.pop("label") if "label" in frame.columns else None
    features = frame.apply(pd.to_numeric, errors="raise").astype(float)
    return features, labels, ids
