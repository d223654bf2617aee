"""Cleaning and window selection for raw intensity series."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAD_SCALE = 1.4826

REASONS = ("h0_out_of_range", "f0_too_high", "brightening", "insufficient_drop",
           "too_short", "no_window")


class MissingMetadataError(ValueError):
    pass


class NoWindowError(ValueError):
    """No window of sustained decrease of the minimum duration exists."""


class DegenerateSeriesError(ValueError):
    pass


@dataclass
class SeriesMeta:
    subject_id: str
    trial_id: str
    roi_id: str
    f0_percent: float | None
    h0_um: float | None
    roi_x: float | None = None
    roi_y: float | None = None
    force_include: bool = False
    # externally computed image-based indicators, passed through untouched
    quality_flags: dict = field(default_factory=dict)

    @property
    def key(self) -> tuple:
        return (str(self.subject_id), str(self.trial_id), str(self.roi_id))


@dataclass
class RawSeries:
    times: np.ndarray
    values: np.ndarray
    meta: SeriesMeta | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if self.times.size < 2:
            raise ValueError("a series needs at least two samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("values must be finite and nonnegative")

    def with_values(self, values) -> "RawSeries":
        return RawSeries(self.times, values, self.meta)


@dataclass
class ScreeningReport:
    reasons: list = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return not self.reasons

    def merge(self, other: "ScreeningReport") -> "ScreeningReport":
        merged = list(self.reasons)
        merged += [r for r in other.reasons if r not in merged]
        return ScreeningReport(merged)


@dataclass
class CleanSeries:
    t: np.ndarray
    I: np.ndarray
    window: tuple
    ts_s: float


@dataclass(frozen=True)
class PreprocessConfig:
    hampel_window: int = 5
    hampel_nsigma: float = 3.0
    smooth_width: int = 5
    brighten_thresh: float = 1.10
    drop_ratio: float = 0.75
    edge_fraction: float = 0.10
    min_window_s: float = 3.0
    plateau_frac: float = 0.01
    grow_frac: float = 0.5
    # a step must exceed this many noise standard deviations to trim the
    # window; the noise level is estimated from the series itself
    trim_nsigma: float = 2.0
    h0_range_um: tuple = (1.0, 10.0)
    f0_max_percent: float = 0.35
    min_samples: int = 10
    # fit the smoothed values instead of the despiked ones; smoothing always
    # drives window selection
    fit_smoothed: bool = False


DEFAULT_PREPROCESS = PreprocessConfig()


def screen_scales(h0_um, f0_percent, config: PreprocessConfig = DEFAULT_PREPROCESS) -> ScreeningReport:
    if h0_um is None or f0_percent is None:
        missing = "h0_um" if h0_um is None else "f0_percent"
        raise MissingMetadataError(f"missing metadata field: {missing}")
    reasons = []
    lo, hi = config.h0_range_um
    if not lo <= h0_um <= hi:
        reasons.append("h0_out_of_range")
    if f0_percent > config.f0_max_percent:
        reasons.append("f0_too_high")
    return ScreeningReport(reasons)


def _edge_medians(series: RawSeries, fraction: float) -> tuple[float, float]:
    t, y = series.times, series.values
    span = fraction * (t[-1] - t[0])
    head = y[t <= t[0] + span]
    tail = y[t >= t[-1] - span]
    return float(np.median(head)), float(np.median(tail))


def reject_brightening(series: RawSeries, config: PreprocessConfig = DEFAULT_PREPROCESS) -> ScreeningReport:
    if series.values.size < config.min_samples:
        return ScreeningReport(["too_short"])
    first, last = _edge_medians(series, config.edge_fraction)
    return ScreeningReport(["brightening"] if last >= config.brighten_thresh * first else [])


def quality_drop_check(series: RawSeries, config: PreprocessConfig = DEFAULT_PREPROCESS) -> ScreeningReport:
    if series.values.size < config.min_samples:
        return ScreeningReport(["too_short"])
    first, last = _edge_medians(series, config.edge_fraction)
    return ScreeningReport([] if last <= config.drop_ratio * first else ["insufficient_drop"])


def screen(series: RawSeries, config: PreprocessConfig = DEFAULT_PREPROCESS) -> ScreeningReport:
    meta = series.meta
    if meta is None:
        raise MissingMetadataError("series has no metadata")
    report = screen_scales(meta.h0_um, meta.f0_percent, config)
    report = report.merge(reject_brightening(series, config))
    report = report.merge(quality_drop_check(series, config))
    # fixed ordering so reports do not depend on rule evaluation order
    return ScreeningReport([r for r in REASONS if r in report.reasons])


def _hampel_pass(y: np.ndarray, half: int, nsigma: float) -> np.ndarray:
    out = y.copy()
    n = y.size
    for i in range(n):
        w = y[max(0, i - half):min(n, i + half + 1)]
        med = np.median(w)
        mad = np.median(np.abs(w - med))
        if abs(y[i] - med) > nsigma * MAD_SCALE * mad:
            out[i] = med
    return out


def despike(values, window: int = 5, nsigma: float = 3.0, max_passes: int = 20) -> np.ndarray:
    """Hampel filter, repeated until no sample changes.

    A sample is replaced by the median of the ``window`` samples centred on
    it when it deviates from that median by more than ``nsigma`` scaled MADs.
    Windows are truncated at the ends.
    """
    y = np.asarray(values, dtype=float)
    half = window // 2
    for _ in range(max_passes):
        nxt = _hampel_pass(y, half, nsigma)
        if np.array_equal(nxt, y):
            break
        y = nxt
    return y


def smooth(values, width: int = 5) -> np.ndarray:
    """Centred moving average; the window shrinks symmetrically at the ends."""
    y = np.asarray(values, dtype=float)
    n = y.size
    if width < 1 or width % 2 == 0:
        raise ValueError("width must be a positive odd integer")
    half = width // 2
    csum = np.concatenate([[0.0], np.cumsum(y)])
    idx = np.arange(n)
    k = np.minimum(np.minimum(idx, n - 1 - idx), half)
    return (csum[idx + k + 1] - csum[idx - k]) / (2 * k + 1)


def _steepest_window(t, y, min_dur, rel_tol=1e-9):
    cands = []  # (rate, start, end) with the longest near-best end for each start
    for i in range(t.size - 1):
        j0 = max(int(np.searchsorted(t, t[i] + min_dur * (1 - 1e-9), side="left")), i + 1)
        if j0 >= t.size:
            break
        rate = (y[i] - y[j0:]) / (t[j0:] - t[i])
        r = rate.max()
        j = j0 + int(np.nonzero(rate >= r - rel_tol * abs(r))[0][-1])
        cands.append((r, i, j))
    if not cands:
        return None
    best = max(c[0] for c in cands)
    if not best > 0:
        return None
    ties = [c for c in cands if c[0] >= best - rel_tol * abs(best)]
    _, i, j = max(ties, key=lambda c: (t[c[2]] - t[c[1]], -c[1]))
    return i, j


def noise_level(values) -> float:
    """Robust per-sample noise standard deviation from second differences."""
    y = np.asarray(values, dtype=float)
    if y.size < 3:
        return 0.0
    return float(1.4826 * np.median(np.abs(np.diff(y, 2))) / np.sqrt(6.0))


def _grow_and_trim(t, y, s, e, config, tol=0.0):
    block = max(config.smooth_width, 1)
    for _ in range(100):
        s0, e0 = s, e
        rate = (y[s] - y[e]) / (t[e] - t[s])
        # grow by one step, or by a block of steps whose mean rate qualifies
        # when frame noise hides the trend of a single step
        target = config.grow_frac * rate
        while s > 0:
            k = next((k for k in (1, min(block, s), min(2 * block, s)) if (y[s - k] - y[s]) / (t[s] - t[s - k]) >= target), 0)
            if not k:
                break
            s -= k
        while e < y.size - 1:
            k = next((k for k in (1, min(block, y.size - 1 - e), min(2 * block, y.size - 1 - e))
                      if (y[e] - y[e + k]) / (t[e + k] - t[e]) >= target), 0)
            if not k:
                break
            e += k
        while s < e and y[s + 1] - y[s] >= tol:
            s += 1
        eps = config.plateau_frac * (y[s] - y[e])
        while e > s and (y[e] - y[e - 1]) + eps * (t[e] - t[e - 1]) >= tol:
            e -= 1
        if (s, e) == (s0, e0):
            break
    return s, e


def _refine(t, raw, s, e, half, config, tol=0.0):
    # the moving average rounds corners by up to `half` samples; place the
    # ends on the unsmoothed peak and trough nearby, then re-trim
    lo, hi = max(0, s - half), min(e, s + half)
    seg = raw[lo:hi + 1]
    s = lo + int(np.flatnonzero(seg == seg.max())[-1])
    lo, hi = max(s, e - half), min(raw.size - 1, e + half)
    e = lo + int(np.argmin(raw[lo:hi + 1]))
    while s < e and raw[s + 1] - raw[s] >= tol:
        s += 1
    eps = config.plateau_frac * (raw[s] - raw[e])
    while e > s and (raw[e] - raw[e - 1]) + eps * (t[e] - t[e - 1]) >= tol:
        e -= 1
    return s, e


def select_window(times, values, config: PreprocessConfig = DEFAULT_PREPROCESS,
                  raw=None) -> tuple[float, float]:
    """Window of steepest average decrease lasting at least ``min_window_s``.

    ``values`` should already be despiked and smoothed. The steepest window is
    found by exhaustive search (ties go to the longer window), grown over
    neighbouring steps (single, or blocks of one or two ``smooth_width``) that still fall
    at ``grow_frac`` of its mean rate, and
    then stripped of any leading rise and of a trailing plateau flatter than
    ``plateau_frac`` of the window drop per second. Growing and trimming are
    repeated until the window is stable. A trim step must clear
    ``trim_nsigma`` times the noise level of a one-sample difference, so that
    frame noise alone does not shrink the window; on noiseless data this
    tolerance vanishes.

    When the unsmoothed ``raw`` values are given, each end is moved to the
    raw peak (start) or trough (end) within half a smoothing width and the
    trims are applied again to ``raw``; this refinement is kept only if the
    window still lasts ``min_window_s``.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if t[-1] - t[0] < config.min_window_s * (1 - 1e-9):
        raise NoWindowError(f"series spans {t[-1] - t[0]:.3g} s, less than {config.min_window_s} s")
    pair = _steepest_window(t, y, config.min_window_s)
    if pair is None:
        raise NoWindowError("series never decreases over the minimum duration")
    sigma = noise_level(y if raw is None else raw)
    width = 1 if raw is None else max(config.smooth_width, 1)
    step_sd = sigma * np.sqrt(2.0)
    s, e = _grow_and_trim(t, y, *pair, config, config.trim_nsigma * step_sd / width)
    if t[e] - t[s] < config.min_window_s * (1 - 1e-9):
        raise NoWindowError(
            f"decrease lasts only {t[e] - t[s]:.3g} s after trimming rises and plateaus")
    if raw is not None:
        rs, re_ = _refine(t, np.asarray(raw, dtype=float), s, e, config.smooth_width // 2, config,
                          config.trim_nsigma * step_sd)
        if t[re_] - t[rs] >= config.min_window_s * (1 - 1e-9):
            s, e = rs, re_
    return float(t[s]), float(t[e])


def normalize(times, values, window: tuple[float, float]) -> CleanSeries:
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    start, end = window
    inside = (t >= start) & (t <= end)
    tw, yw = t[inside], y[inside]
    if tw.size < 2:
        raise DegenerateSeriesError("window holds fewer than two samples")
    if not yw[0] > 0:
        raise DegenerateSeriesError("first windowed intensity must be positive")
    ts = float(tw[-1] - tw[0])
    return CleanSeries(t=(tw - tw[0]) / ts, I=yw / yw[0], window=(float(tw[0]), float(tw[-1])), ts_s=ts)


def canonical_values(values) -> np.ndarray:
    """Divide by the largest sample.

    The quotient is exactly invariant to a uniform rescaling whenever the
    rescaled samples are themselves exact (integer camera counts, power-of-two
    or integer factors), so everything downstream sees identical arrays.
    """
    y = np.asarray(values, dtype=float)
    peak = y.max()
    if not peak > 0:
        raise DegenerateSeriesError("series is identically zero")
    return y / peak


def prepare(series: RawSeries, config: PreprocessConfig = DEFAULT_PREPROCESS
            ) -> tuple[ScreeningReport, CleanSeries | None]:
    """Screen and clean one raw series.

    The moving average locates the window; the fitted values are the
    despiked samples unless ``config.fit_smoothed`` is set, because averaging
    a curved decay biases the recovered rates. Returns the screening report and, when the series passes (or metadata
    forces inclusion), the cleaned series. Window failures are reported as
    ``no_window``.
    """
    canon = series.with_values(canonical_values(series.values))
    report = screen(canon, config)
    if not report.accepted and not canon.meta.force_include:
        return report, None
    clean = despike(canon.values, config.hampel_window, config.hampel_nsigma)
    smoothed = smooth(clean, min(config.smooth_width, clean.size if clean.size % 2 else clean.size - 1))
    try:
        window = select_window(canon.times, smoothed, config, raw=clean)
    except NoWindowError:
        return report.merge(ScreeningReport(["no_window"])), None
    return report, normalize(canon.times, smoothed if config.fit_smoothed else clean, window)
