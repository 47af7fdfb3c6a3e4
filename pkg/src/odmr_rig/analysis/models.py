"""Fit models for the contrast curves, with analytic Jacobians.

Every model takes the abscissa in seconds and returns contrast in whatever
units the data carries (percent for sweeps, PL units for traces).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

TWO_PI = 2 * math.pi
TINY_TIME = 1e-15
N_REVIVALS = 10


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    params: tuple[str, ...]
    units: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray, np.ndarray], np.ndarray]
    periodic: tuple[str, ...] = ()

    @property
    def n_params(self) -> int:
        return len(self.params)

    def __call__(self, x, p) -> np.ndarray:
        return self.func(np.asarray(x, dtype=float), np.asarray(p, dtype=float))

    def jacobian(self, x, p) -> np.ndarray:
        return self.jac(np.asarray(x, dtype=float), np.asarray(p, dtype=float))

    def index(self, name: str) -> int:
        return self.params.index(name)

    def project(self, p: np.ndarray) -> np.ndarray:
        """Wrap periodic parameters into [-pi, pi] and clip the rest to bounds."""
        q = np.clip(np.asarray(p, dtype=float), self.lower, self.upper)
        for name in self.periodic:
            i = self.index(name)
            q[i] = (p[i] + math.pi) % TWO_PI - math.pi
        return q

    def as_dict(self, p) -> dict[str, float]:
        return {k: float(v) for k, v in zip(self.params, p)}


def _tone(x, amp, freq, phase, tau):
    arg = TWO_PI * freq * x + phase
    env = np.exp(-x / tau)
    s, c = np.sin(arg), np.cos(arg)
    value = amp * s * env
    # d/d amp, freq, phase, tau
    cols = [s * env, amp * c * env * TWO_PI * x, amp * c * env, value * x / tau ** 2]
    return value, cols


def _rabi2tone(x, p):
    a1, f1, p1, t1, a2, f2, p2, t2, b, d = p
    return _tone(x, a1, f1, p1, t1)[0] + _tone(x, a2, f2, p2, t2)[0] + b * x + d


def _rabi2tone_jac(x, p):
    a1, f1, p1, t1, a2, f2, p2, t2, b, d = p
    cols = _tone(x, a1, f1, p1, t1)[1] + _tone(x, a2, f2, p2, t2)[1] + [x, np.ones_like(x)]
    return np.stack(cols, axis=1)


def _ramsey(x, p):
    a, f, ph, t, b, d = p
    return _tone(x, a, f, ph, t)[0] + b * x + d


def _ramsey_jac(x, p):
    a, f, ph, t, b, d = p
    return np.stack(_tone(x, a, f, ph, t)[1] + [x, np.ones_like(x)], axis=1)


def _exp_decay(x, p):
    a, t1, b = p
    return a * np.exp(-x / t1) + b


def _exp_decay_jac(x, p):
    a, t1, b = p
    e = np.exp(-x / t1)
    return np.stack([e, a * e * x / t1 ** 2, np.ones_like(x)], axis=1)


def _stretch_terms(x, tau, n):
    ratio = x / tau
    with np.errstate(divide="ignore"):
        log_ratio = np.where(ratio > 0, np.log(np.where(ratio > 0, ratio, 1.0)), 0.0)
    u = np.where(ratio > 0, np.exp(n * log_ratio), 0.0)
    return u, log_ratio


def _stretched_exp(x, p):
    a, tau, n, b = p
    u, _ = _stretch_terms(x, tau, n)
    return a * np.exp(-u) + b


def _stretched_exp_jac(x, p):
    a, tau, n, b = p
    u, log_ratio = _stretch_terms(x, tau, n)
    e = np.exp(-u)
    return np.stack([e, a * e * u * n / tau, -a * e * u * log_ratio, np.ones_like(x)], axis=1)


def _comb(x, t_rev, t_dec):
    """Normalized revival comb and its derivatives in t_rev and t_dec."""
    j = np.arange(N_REVIVALS + 1)
    w = (x[:, None] - j * t_rev) / t_dec
    g = np.exp(-w ** 2)
    s = g.sum(axis=1)
    ds_rev = (g * 2 * w * j / t_dec).sum(axis=1)
    ds_dec = (g * 2 * w ** 2 / t_dec).sum(axis=1)
    w0 = -j * t_rev / t_dec
    g0 = np.exp(-w0 ** 2)
    norm = g0.sum()
    dn_rev = (g0 * 2 * w0 * j / t_dec).sum()
    dn_dec = (g0 * 2 * w0 ** 2 / t_dec).sum()
    value = s / norm
    return value, (ds_rev * norm - s * dn_rev) / norm ** 2, (ds_dec * norm - s * dn_dec) / norm ** 2


def _revival_train(x, p):
    a, b, d, t2b, n, t_rev, t_dec = p
    u, _ = _stretch_terms(x, t2b, n)
    comb, _, _ = _comb(x, t_rev, t_dec)
    return a + b * x + d * np.exp(-u) * comb


def _revival_train_jac(x, p):
    a, b, d, t2b, n, t_rev, t_dec = p
    u, log_ratio = _stretch_terms(x, t2b, n)
    e = np.exp(-u)
    comb, dc_rev, dc_dec = _comb(x, t_rev, t_dec)
    return np.stack([
        np.ones_like(x),
        x,
        e * comb,
        d * comb * e * u * n / t2b,
        -d * comb * e * u * log_ratio,
        d * e * dc_rev,
        d * e * dc_dec,
    ], axis=1)


def _repol(x, p):
    a, tau, b = p
    return b - a * np.exp(-x / tau)


def _repol_jac(x, p):
    a, tau, b = p
    e = np.exp(-x / tau)
    return np.stack([-e, -a * e * x / tau ** 2, np.ones_like(x)], axis=1)


def _linear(x, p):
    return p[0] * x + p[1]


def _linear_jac(x, p):
    return np.stack([x, np.ones_like(x)], axis=1)


INF = math.inf
PI = math.pi

MODELS: dict[str, ModelSpec] = {
    "rabi2tone": ModelSpec(
        "rabi2tone",
        ("A1", "f1", "phi1", "T1R", "A2", "f2", "phi2", "T2R", "B", "D"),
        ("%", "Hz", "rad", "s", "%", "Hz", "rad", "s", "%/s", "%"),
        (-INF, 0.0, -PI, TINY_TIME, -INF, 0.0, -PI, TINY_TIME, -INF, -INF),
        (INF, INF, PI, INF, INF, INF, PI, INF, INF, INF),
        _rabi2tone, _rabi2tone_jac, periodic=("phi1", "phi2")),
    "ramsey": ModelSpec(
        "ramsey",
        ("A", "f_ramsey", "phi", "T_ramsey", "B", "D"),
        ("%", "Hz", "rad", "s", "%/s", "%"),
        (-INF, 0.0, -PI, TINY_TIME, -INF, -INF),
        (INF, INF, PI, INF, INF, INF),
        _ramsey, _ramsey_jac, periodic=("phi",)),
    "exp_decay": ModelSpec(
        "exp_decay", ("A", "T1", "B"), ("%", "s", "%"),
        (-INF, TINY_TIME, -INF), (INF, INF, INF), _exp_decay, _exp_decay_jac),
    "stretched_exp": ModelSpec(
        "stretched_exp", ("A", "T2_alpha", "n", "B"), ("%", "s", "1", "%"),
        (-INF, TINY_TIME, 0.5, -INF), (INF, INF, 3.0, INF), _stretched_exp, _stretched_exp_jac),
    "revival_train": ModelSpec(
        "revival_train", ("A", "B", "D", "T2_beta", "n", "T_rev", "T_dec"),
        ("%", "%/s", "%", "s", "1", "s", "s"),
        (-INF, -INF, -INF, TINY_TIME, 0.5, TINY_TIME, TINY_TIME), (INF, INF, INF, INF, 3.0, INF, INF),
        _revival_train, _revival_train_jac),
    "single_exp_repol": ModelSpec(
        "single_exp_repol", ("A", "tau_repol", "B"), ("PL", "s", "PL"),
        (-INF, TINY_TIME, -INF), (INF, INF, INF), _repol, _repol_jac),
    "linear": ModelSpec(
        "linear", ("slope", "intercept"), ("y/x", "y"), (-INF, -INF), (INF, INF), _linear, _linear_jac),
}


def get_model(model_id: str) -> ModelSpec:
    try:
        return MODELS[model_id]
    except KeyError:
        raise KeyError(f"unknown model {model_id!r}; known: {', '.join(MODELS)}") from None
