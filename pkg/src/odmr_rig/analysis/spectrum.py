"""One-sided periodogram of a uniformly sampled sweep."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Spectrum:
    frequencies: np.ndarray
    power: np.ndarray

    @property
    def df(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])

    def peaks(self) -> list[int]:
        """Indices of strict local maxima above DC, strongest first."""
        p = self.power
        idx = [i for i in range(1, len(p)) if p[i] > p[i - 1] and (i == len(p) - 1 or p[i] >= p[i + 1])]
        return sorted(idx, key=lambda i: -p[i])


def uniform_step(xs, rtol: float = 1e-6) -> float:
    xs = np.asarray(xs, dtype=float)
    d = np.diff(xs)
    if len(d) == 0 or np.any(d <= 0) or np.ptp(d) > rtol * abs(d.mean()):
        raise ValueError("psd needs strictly increasing, uniformly spaced sweep values")
    return float(d.mean())


def psd(ys, dx, pad_factor: int = 1) -> Spectrum:
    """Mean-subtracted periodogram in (units of ys)^2 per Hz.

    ``dx`` is the sweep step, or the array of sweep values (checked for
    uniform spacing). With ``pad_factor`` > 1 the series is zero-padded,
    which interpolates the spectrum without changing its integral:
    sum(power) * df equals the mean square of the mean-subtracted series.
    """
    y = np.asarray(ys, dtype=float)
    if np.ndim(dx) > 0:
        if len(dx) != len(y):
            raise ValueError("sweep values and series differ in length")
        dx = uniform_step(dx)
    if len(y) < 8:
        raise ValueError("psd needs at least 8 points")
    if not dx > 0:
        raise ValueError("sweep step must be positive")
    n = len(y)
    m = n * max(int(pad_factor), 1)
    spec = np.fft.rfft(y - y.mean(), n=m)
    power = np.abs(spec) ** 2 * dx / n
    if m % 2 == 0:
        power[1:-1] *= 2
    else:
        power[1:] *= 2
    return Spectrum(np.fft.rfftfreq(m, dx), power)
