"""Initial guesses and the per-protocol fit wrappers."""

from __future__ import annotations

import math

import numpy as np

from .models import MODELS, TWO_PI, ModelSpec, get_model
from .solver import FitError, FitReport, nlls_fit
from .spectrum import psd


class NoDecayError(FitError):
    """The trace carries no resolvable exponential recovery."""


def _spec(model: ModelSpec | str) -> ModelSpec:
    return get_model(model) if isinstance(model, str) else model


def _span(x: np.ndarray) -> float:
    span = float(x.max() - x.min())
    return span if span > 0 else 1.0


def _step(x: np.ndarray) -> float:
    d = np.diff(np.sort(x))
    d = d[d > 0]
    return float(d.min()) if len(d) else _span(x)


def _linear_solve(columns: list[np.ndarray], y: np.ndarray) -> tuple[np.ndarray, float]:
    a = np.stack(columns, axis=1)
    coef = np.linalg.lstsq(a, y, rcond=None)[0]
    resid = a @ coef - y
    return coef, float(resid @ resid)


def _tone_columns(x, f, tau):
    env = np.exp(-x / tau)
    arg = TWO_PI * f * x
    return [np.sin(arg) * env, np.cos(arg) * env]


def _amp_phase(c_sin: float, c_cos: float) -> tuple[float, float]:
    # A sin(t + phi) = A cos(phi) sin(t) + A sin(phi) cos(t)
    return math.hypot(c_sin, c_cos), math.atan2(c_cos, c_sin)


def _spectral_peaks(x, y, pad: int = 16) -> list[float]:
    if len(x) < 8:
        return []
    try:
        spec = psd(y, x, pad_factor=pad)
    except ValueError:
        return []
    if not np.any(spec.power > 0):
        return []
    return [float(spec.frequencies[i]) for i in spec.peaks()]


def _tail_mean(y: np.ndarray, frac: float = 0.2) -> float:
    k = max(1, int(round(frac * len(y))))
    return float(np.mean(y[-k:]))


def _log_envelope_tau(x, y, base, fallback) -> float:
    """Decay constant from a straight-line fit to log|y - base|."""
    dev = np.abs(y - base)
    if dev.max() <= 0:
        return fallback
    keep = dev > 0.1 * dev.max()
    if keep.sum() < 2 or np.ptp(x[keep]) == 0:
        return fallback
    slope = np.polyfit(x[keep], np.log(dev[keep]), 1)[0]
    if not slope < 0:
        return fallback
    return float(np.clip(-1.0 / slope, _step(x) / 2, 20 * _span(x)))


def _clip_guess(model: ModelSpec, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    lo, hi = np.array(model.lower), np.array(model.upper)
    both = np.isfinite(lo) & np.isfinite(hi)
    fallback = np.where(np.isfinite(lo), np.where(both, hi, lo + 1.0), 0.0)
    fallback = np.where(both, 0.5 * (np.where(both, lo, 0) + np.where(both, hi, 0)), fallback)
    p = np.where(np.isfinite(p), p, fallback)
    return model.project(p)


def _tone_guess(x, y, freqs, taus):
    cols = []
    for f, tau in zip(freqs, taus):
        cols += _tone_columns(x, f, tau)
    coef, rss = _linear_solve(cols + [x, np.ones_like(x)], y)
    tones = []
    for i, (f, tau) in enumerate(zip(freqs, taus)):
        amp, ph = _amp_phase(coef[2 * i], coef[2 * i + 1])
        tones += [amp, f, ph, tau]
    return tones + [coef[-2], coef[-1]], rss


def initial_guess(model: ModelSpec | str, xs, ys) -> np.ndarray:
    spec = _spec(model)
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    span = _span(x)
    mid = spec.model_id
    if mid in ("rabi2tone", "ramsey"):
        peaks = _spectral_peaks(x, y)
        f1 = peaks[0] if peaks else 2.0 / span
        if mid == "ramsey":
            p, _ = _tone_guess(x, y, [f1], [span / 3])
            return _clip_guess(spec, p)
        higher = [f for f in peaks[1:] if f > 1.05 * f1]
        f2 = higher[0] if higher else 1.3 * f1
        p, _ = _tone_guess(x, y, [f1, f2], [span / 3, span / 3])
        return _clip_guess(spec, p)
    if mid in ("exp_decay", "single_exp_repol"):
        base = _tail_mean(y)
        start = float(np.mean(y[: max(1, len(y) // 20)]))
        tau = _log_envelope_tau(x, y, base, span / 3)
        amp = start - base
        # the log envelope is fragile on noisy tails; keep it only if no grid point fits better
        x0 = x - x.min()
        taus = np.r_[tau, np.geomspace(_step(x), 3 * span, 48)]
        fits = [_linear_solve([np.exp(-x0 / t), np.ones_like(x)], y) for t in taus]
        k = int(np.argmin([rss for _, rss in fits]))
        if np.ptp(y) > 0 and k > 0:
            (amp, base), tau = fits[k][0], float(taus[k])
            amp *= math.exp(x.min() / tau)
        if mid == "single_exp_repol":
            return _clip_guess(spec, [-amp, tau, base])
        return _clip_guess(spec, [amp, tau, base])
    if mid == "stretched_exp":
        base = _tail_mean(y)
        amp = float(y[np.argmin(x)]) - base
        tau = _log_envelope_tau(x, y, base, span / 3)
        n = 1.0
        if amp != 0:
            ratio = (y - base) / amp
            keep = (ratio > 0.1) & (ratio < 0.9) & (x > 0)
            if keep.sum() >= 2:
                slope, icpt = np.polyfit(np.log(x[keep]), np.log(-np.log(ratio[keep])), 1)
                if 0.5 <= slope <= 3:
                    n, tau = float(slope), float(math.exp(-icpt / slope))
        return _clip_guess(spec, [amp, tau, n, base])
    if mid == "revival_train":
        return _clip_guess(spec, _revival_guess(spec, x, y))
    if mid == "linear":
        slope, icpt, _ = linear_fit(x, y)
        return np.array([slope, icpt])
    raise KeyError(mid)


def _revival_guess(spec: ModelSpec, x, y) -> list[float]:
    """Grid over (T_rev, T_dec) with the linear parameters projected out."""
    span = _span(x)
    peaks = [f for f in _spectral_peaks(x, y - np.polyval(np.polyfit(x, y, 1), x)) if f > 0]
    t2b, n = span / 2, 2.0
    centers = [1.0 / f for f in peaks[:3] if 1.0 / f < span / 2] or [span / 8]
    best = None
    for center in centers:
        for t_rev in center * np.linspace(0.8, 1.2, 41):
            for t_dec in t_rev * np.array([0.05, 0.1, 0.15, 0.2, 0.3]):
                shape = spec(x, [0.0, 0.0, 1.0, t2b, n, t_rev, t_dec])
                coef, rss = _linear_solve([np.ones_like(x), x, shape], y)
                if best is None or rss < best[0]:
                    best = (rss, [coef[0], coef[1], coef[2], t2b, n, t_rev, t_dec])
    return best[1]


def _best(reports: list[FitReport]) -> FitReport:
    if not reports:
        raise FitError("no start point produced a fit")
    ok = [r for r in reports if r.converged] or reports
    return min(ok, key=lambda r: r.rss)


def _try_fit(spec, x, y, guess, reports):
    try:
        reports.append(nlls_fit(spec, x, y, _clip_guess(spec, guess)))
    except (FitError, np.linalg.LinAlgError):
        pass


def fit_rabi(xs, ys) -> FitReport:
    """Two damped tones; f1 <= f2 after the fit."""
    spec = MODELS["rabi2tone"]
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    span = _span(x)
    peaks = [f for f in _spectral_peaks(x, y) if f * span >= 1.0]
    f1s = peaks[:2] or [2.0 / span]
    reports: list[FitReport] = []
    for f1 in f1s:
        f2s = {f for f in peaks[:4] if f > 1.02 * f1} | {1.2 * f1, 1.4 * f1}
        for f2 in sorted(f2s):
            for tau in (span / 6, span / 3, span):
                guess, _ = _tone_guess(x, y, [f1, f2], [tau, tau])
                _try_fit(spec, x, y, guess, reports)
    # a tone with under one cycle in the window is a baseline, not an oscillation;
    # one above the Nyquist frequency is an alias of a slower one
    nyquist = 0.5 / _step(x)
    resolved = [r for r in reports if min(r.params["f1"], r.params["f2"]) * span >= 1.0
                and max(r.params["f1"], r.params["f2"]) <= nyquist]
    return _order_tones(_best(resolved or reports))


def _order_tones(report: FitReport) -> FitReport:
    p = report.params
    if p["f1"] <= p["f2"]:
        return report
    swap = {"A1": "A2", "f1": "f2", "phi1": "phi2", "T1R": "T2R"}
    swap.update({v: k for k, v in swap.items()})
    sig = report.uncertainties
    report.params = {k: p[swap.get(k, k)] for k in p}
    report.uncertainties = {k: sig[swap.get(k, k)] for k in p}
    return report


def fit_ramsey(xs, ys) -> FitReport:
    """Single damped tone, started from a frequency grid plus the spectral peaks."""
    spec = MODELS["ramsey"]
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    span = _span(x)
    nyquist = 0.5 / _step(x)
    freqs = set(_spectral_peaks(x, y)[:3]) | set(np.linspace(1.0 / span, 0.5 * nyquist, 24))
    reports: list[FitReport] = []
    for f in sorted(freqs):
        for tau in (span / 16, span / 8, span / 4, span / 2):
            guess, _ = _tone_guess(x, y, [f], [tau])
            _try_fit(spec, x, y, guess, reports)
    # above the Nyquist frequency a tone is an alias of a slower one on this grid
    baseband = [r for r in reports if r.params["f_ramsey"] <= nyquist]
    return _best(baseband or reports)


def fit_t1(xs, ys) -> FitReport:
    spec = MODELS["exp_decay"]
    return nlls_fit(spec, xs, ys, initial_guess(spec, xs, ys))


def fit_echo_decay(xs, ys) -> FitReport:
    spec = MODELS["stretched_exp"]
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    guess = initial_guess(spec, x, y)
    reports: list[FitReport] = []
    for n in {guess[2], 1.0, 2.0}:
        _try_fit(spec, x, y, [guess[0], guess[1], n, guess[3]], reports)
    return _best(reports)


def fit_revival_train(xs, ys) -> FitReport:
    spec = MODELS["revival_train"]
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    span = _span(x)
    a, b, d, _, _, t_rev, t_dec = initial_guess(spec, x, y)
    reports: list[FitReport] = []
    for t2b in (span / 4, span / 2, span):
        for n in (1.0, 2.0):
            shape = spec(x, [0.0, 0.0, 1.0, t2b, n, t_rev, t_dec])
            coef, _ = _linear_solve([np.ones_like(x), x, shape], y)
            _try_fit(spec, x, y, [coef[0], coef[1], coef[2], t2b, n, t_rev, t_dec], reports)
    return _best(reports)


def fit_repolarization(xs, ys) -> FitReport:
    """Single-exponential recovery; refuses traces with no resolvable decay."""
    spec = MODELS["single_exp_repol"]
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    scale = max(float(np.max(np.abs(y))), 1e-300)
    if np.ptp(y) <= 1e-12 * scale:
        raise NoDecayError("no decay: the trace is flat")
    report = nlls_fit(spec, x, y, initial_guess(spec, x, y))
    amp, sig = report.params["A"], report.uncertainties["A"]
    if not report.converged or abs(amp) < 5 * sig or abs(amp) < 1e-9 * scale:
        raise NoDecayError(f"no decay: recovery amplitude {amp:.3g} is not resolved (sigma {sig:.3g})")
    return report


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Ordinary least squares line; returns (slope, intercept, r^2)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if len(x) < 2 or len(x) != len(y):
        raise ValueError("linear_fit needs at least two (x, y) pairs")
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        raise ValueError("linear_fit: all x values are identical")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    icpt = float(ym - slope * xm)
    syy = float(np.sum((y - ym) ** 2))
    ss_res = float(np.sum((y - slope * x - icpt) ** 2))
    r2 = 1.0 - ss_res / syy if syy > 0 else 1.0
    return slope, icpt, r2


def locate_extremum(xs, ys) -> FitReport:
    """Swept value where the contrast strays furthest from the sweep median."""
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    if len(x) == 0 or len(x) != len(y):
        raise FitError("locate_extremum needs matching, non-empty xs and ys")
    i = int(np.argmax(np.abs(y - np.median(y))))
    step = _step(x) if len(x) > 1 else 0.0
    params = {"t_extremum": float(x[i]), "contrast_extremum": float(y[i])}
    sig = {"t_extremum": step, "contrast_extremum": 0.0}
    return FitReport("extremum", params, sig, 0.0, 0, True, dict(params), "largest deviation from the median",
                     n_points=len(x))


FITTERS = {
    "rabi2tone": fit_rabi,
    "ramsey": fit_ramsey,
    "exp_decay": fit_t1,
    "stretched_exp": fit_echo_decay,
    "revival_train": fit_revival_train,
    "single_exp_repol": fit_repolarization,
    "extremum": locate_extremum,
}
