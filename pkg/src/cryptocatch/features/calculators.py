"""Time-series feature calculators for short packet sequences.

Every calculator takes a 1-D float array ``x`` (packet lengths or
inter-arrival times of one window, so typically 1 to 10 values) and returns
a float, or :data:`MISSING` when the feature is undefined for that input.
"""
from __future__ import annotations

import functools
import math

import numpy as np

MISSING = math.nan


def is_missing(value) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def sum_values(x) -> float:
    return float(np.sum(_as_array(x)))


def mean_n_absolute_max(x, n: int = 7) -> float:
    """Mean of the ``n`` largest absolute values (fewer if ``len(x) < n``)."""
    a = np.abs(_as_array(x))
    if a.size == 0:
        return MISSING
    top = np.sort(a)[::-1][:n]
    return float(np.mean(top))


def c3(x, lag: int) -> float:
    """Schreiber-Schmitz C3 non-linearity statistic."""
    if lag < 1:
        raise ValueError("lag must be >= 1")
    a = _as_array(x)
    n = a.size
    if n <= 2 * lag:
        return MISSING
    m = n - 2 * lag
    return float(np.mean(a[2 * lag :] * a[lag : lag + m] * a[:m]))


def binned_entropy(x, max_bins: int = 10) -> float:
    """Shannon entropy (nats) of an equal-width histogram over [min, max]."""
    a = _as_array(x)
    if a.size == 0:
        return MISSING
    lo, hi = a.min(), a.max()
    if hi == lo:
        return 0.0
    idx = np.floor((a - lo) * max_bins / (hi - lo)).astype(int)
    idx = np.clip(idx, 0, max_bins - 1)
    p = np.bincount(idx, minlength=max_bins) / a.size
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def index_mass_quantile(x, q: float = 0.1) -> float:
    """Relative index at which the cumulative absolute mass first reaches ``q``."""
    if not 0 < q < 1:
        raise ValueError("q must be in (0, 1)")
    a = np.abs(_as_array(x))
    total = a.sum()
    if a.size == 0 or total == 0:
        return MISSING
    cum = np.cumsum(a)
    # compare without dividing so exact boundary cases stay exact
    i = int(np.argmax(cum >= q * total))
    return (i + 1) / a.size


def ricker(t, width: float) -> np.ndarray:
    """Mexican-hat wavelet sampled at offsets ``t`` for scale ``width``."""
    t = np.asarray(t, dtype=float)
    amp = 2.0 / (math.sqrt(3.0 * width) * math.pi**0.25)
    r = (t / width) ** 2
    return amp * (1.0 - r) * np.exp(-r / 2.0)


@functools.lru_cache(maxsize=64)
def _kernel(width: int) -> np.ndarray:
    half = 5 * width
    k = ricker(np.arange(-half, half + 1), width)
    k.setflags(write=False)
    return k


def cwt_matrix(x, max_width: int = 5) -> np.ndarray:
    """Ricker CWT of ``x`` for widths 1..max_width (rows), reflect-padded.

    The kernel for width ``w`` spans offsets -5w..5w; the series is mirrored
    (without repeating the edge sample) to cover that span.
    """
    a = _as_array(x)
    n = a.size
    rows = np.empty((max_width, n))
    for wi, w in enumerate(range(1, max_width + 1)):
        padded = np.pad(a, 5 * w, mode="reflect")
        # kernel is symmetric so correlation == convolution
        rows[wi] = np.convolve(padded, _kernel(w), mode="valid")
    return rows


def number_cwt_peaks(x, max_width: int = 5) -> float:
    """Count peaks that persist across Ricker-wavelet scales.

    The series is mean-centred and transformed with :func:`cwt_matrix`.
    Candidates are interior indices that are strict local maxima of both the
    raw series and the width-1 row, with a positive width-1 coefficient no
    smaller than the 10th percentile of that row's absolute values. From each
    candidate a ridge is followed upward in width: at every next width the
    largest local maximum (not below either neighbour) within one index of
    the current position extends it. A candidate counts when its ridge spans
    at least ``ceil(max_width / 4)`` consecutive widths.
    """
    a = _as_array(x)
    n = a.size
    if n < 3:
        return MISSING
    a = a - a.mean()
    m = cwt_matrix(a, max_width)
    row1 = m[0]
    floor = np.percentile(np.abs(row1), 10)
    need = math.ceil(max_width / 4)
    count = 0
    for i in range(1, n - 1):
        if not (row1[i] > row1[i - 1] and row1[i] > row1[i + 1]):
            continue
        if not (a[i] > a[i - 1] and a[i] > a[i + 1]):
            continue
        if row1[i] <= 0 or row1[i] < floor:
            continue
        pos, length = i, 1
        for row in m[1:]:
            best = -1
            for j in range(max(0, pos - 1), min(n, pos + 2)):
                left = row[j - 1] if j > 0 else -np.inf
                right = row[j + 1] if j < n - 1 else -np.inf
                if row[j] >= left and row[j] >= right and (best < 0 or row[j] > row[best]):
                    best = j
            if best < 0:
                break
            pos = best
            length += 1
        if length >= need:
            count += 1
    return float(count)


FFT_ATTRS = ("real", "imag", "abs", "angle")


def _coefficient_attr(c: complex, attr: str) -> float:
    if attr == "real":
        return float(c.real)
    if attr == "imag":
        return float(c.imag)
    if attr == "abs":
        return float(abs(c))
    if attr == "angle":
        re, im = c.real, c.imag
        if abs(im) <= 1e-12 * max(abs(c), 1e-300):
            return 180.0 if re < 0 else 0.0
        deg = math.degrees(math.atan2(im, re))
        return 180.0 if deg == -180.0 else deg
    raise ValueError(f"unknown fft attribute {attr!r}")


def fft_coefficient(x, k: int, attr: str = "abs") -> float:
    """Attribute of the k-th DFT coefficient; angle in degrees in (-180, 180]."""
    a = _as_array(x)
    if attr not in FFT_ATTRS:
        raise ValueError(f"unknown fft attribute {attr!r}")
    if a.size == 0 or not 0 <= k <= a.size // 2:
        return MISSING
    return _coefficient_attr(np.fft.fft(a)[k], attr)


def autocorrelation(x, lag: int) -> float:
    a = _as_array(x)
    n = a.size
    if not 0 <= lag < n:
        return MISSING
    var = a.var()
    if var == 0:
        return MISSING
    if lag == 0:
        return 1.0
    d = a - a.mean()
    return float(np.dot(d[: n - lag], d[lag:]) / ((n - lag) * var))


def _ar_fit(a: np.ndarray, order: int) -> np.ndarray | None:
    n = a.size
    if n < order + 2:
        return None
    rows = n - order
    design = np.ones((rows, order + 1))
    for lag in range(1, order + 1):
        design[:, lag] = a[order - lag : n - lag]
    if np.linalg.matrix_rank(design) < order + 1:
        return None
    coef, *_ = np.linalg.lstsq(design, a[order:], rcond=None)
    return coef


def ar_coefficient(x, k: int = 1, order: int = 2) -> float:
    """Coefficient ``k`` of an OLS autoregression of the given order.

    ``k = 0`` is the intercept, ``k = i`` the weight on lag ``i``. Returns
    MISSING when there are too few points or the lagged design is singular.
    """
    if not 0 <= k <= order:
        raise ValueError("k must be in [0, order]")
    coef = _ar_fit(_as_array(x), order)
    return MISSING if coef is None else float(coef[k])


def friedrich_bins(x, r: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Per-quantile-bin mean signal and mean increment.

    Pairs ``(x[i], x[i+1] - x[i])`` are binned on ``x[i]`` by ``r`` quantile
    bins (right-closed, the first also holding the minimum); empty bins are
    dropped. Returns the two mean arrays ordered by bin.
    """
    a = _as_array(x)
    signal = a[:-1]
    delta = np.diff(a)
    if signal.size == 0:
        return np.empty(0), np.empty(0)
    edges = np.quantile(signal, np.linspace(0.0, 1.0, r + 1))
    bins = np.searchsorted(edges[1:-1], signal, side="left")
    used = np.unique(bins)
    xs = np.array([signal[bins == b].mean() for b in used])
    ys = np.array([delta[bins == b].mean() for b in used])
    return xs, ys


def _drift_fit(xs: np.ndarray, ys: np.ndarray, m: int) -> np.ndarray:
    # full=True returns diagnostics instead of emitting RankWarning
    coef, _ = np.polynomial.polynomial.polyfit(xs, ys, m, full=True)
    return coef


def friedrich_coefficients(x, m: int = 3, r: int = 30) -> np.ndarray:
    """Coefficients (ascending powers) of the fitted drift polynomial ``h``.

    All MISSING when fewer than ``m + 1`` bins are populated.
    """
    xs, ys = friedrich_bins(x, r)
    if xs.size < m + 1:
        return np.full(m + 1, MISSING)
    return _drift_fit(xs, ys, m)


def _polish_root(coef: np.ndarray, v: float) -> float:
    deriv = np.polynomial.polynomial.polyder(coef)
    for _ in range(3):
        slope = np.polynomial.polynomial.polyval(v, deriv)
        if slope == 0:
            break
        step = np.polynomial.polynomial.polyval(v, coef) / slope
        if not math.isfinite(step):
            break
        v -= step
    return float(v)


def polynomial_max_real_root(coef, scale: float = 1.0) -> float:
    """Largest real root of the ascending-power polynomial ``coef``.

    Leading terms whose contribution at ``|v| = scale`` is negligible are
    trimmed first so a near-zero top coefficient does not produce a huge
    spurious root.
    """
    c = np.asarray(coef, dtype=float)
    if not np.all(np.isfinite(c)):
        return MISSING
    scale = max(abs(scale), 1.0)
    size = np.abs(c) * scale ** np.arange(c.size)
    if size.max() == 0:
        return MISSING
    keep = c.size
    while keep > 1 and size[keep - 1] <= 1e-9 * size.max():
        keep -= 1
    c = c[:keep]
    if c.size < 2:
        return MISSING
    roots = np.roots(c[::-1])
    real = roots[np.abs(roots.imag) <= 1e-8 * np.maximum(1.0, np.abs(roots))].real
    if real.size == 0:
        return MISSING
    return _polish_root(c, float(real.max()))


def max_langevin_fixed_point(x, m: int = 3, r: int = 30) -> float:
    """Largest fixed point of the drift polynomial fitted by
    :func:`friedrich_coefficients`."""
    xs, ys = friedrich_bins(x, r)
    if xs.size < m + 1:
        return MISSING
    return langevin_from_fit(_drift_fit(xs, ys, m), xs)


def langevin_from_fit(coef: np.ndarray, xs: np.ndarray) -> float:
    return polynomial_max_real_root(coef, scale=float(np.max(np.abs(xs))))


BASIC_STATS = (
    "mean", "std", "min", "max", "median", "variance", "abs_energy", "mean_abs_change",
)


def basic_stats(x) -> dict[str, float]:
    """Location, spread and energy summaries (population variance)."""
    a = _as_array(x)
    if a.size == 0:
        return {name: MISSING for name in BASIC_STATS}
    return {
        "mean": float(a.mean()),
        "std": float(a.std()),
        "min": float(a.min()),
        "max": float(a.max()),
        "median": float(np.median(a)),
        "variance": float(a.var()),
        "abs_energy": float(np.dot(a, a)),
        "mean_abs_change": float(np.mean(np.abs(np.diff(a)))) if a.size > 1 else MISSING,
    }


ROLLING_STATS = ("moving_average_last", "sliding_std_max")


def rolling_stats(x, w: int = 3) -> dict[str, float]:
    a = _as_array(x)
    if w < 1:
        raise ValueError("w must be >= 1")
    if a.size < w:
        return {name: MISSING for name in ROLLING_STATS}
    views = np.lib.stride_tricks.sliding_window_view(a, w)
    return {
        "moving_average_last": float(views[-1].mean()),
        "sliding_std_max": float(views.std(axis=1).max()),
    }
