"""Piecewise closed-form evolution of a weighted NV ensemble.

Each member of the resonant sub-ensemble is a Bloch vector in the frame
rotating with the microwave carrier, with a static detuning. Every
operation returns a new state; nothing is mutated in place.

Conventions: the drive with phase 0 points along +y, rotations are
right-handed (dv/dt = 2*pi * omega x v), and p0 = (1 + z) / 2 is the
m_s = 0 population that sets the photoluminescence.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtri

GAMMA_C13 = 1.0705e3  # Hz/G


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    b0_field: float = 43.62
    center_frequency: float = 2.74864e9
    gamma_e: float = 2.8025e6
    rabi_coefficient: float = 2.5e6 / math.sqrt(14.74)
    hyperfine_lines: tuple[tuple[float, float], ...] = ((-1.9e6, 0.25), (0.0, 0.5), (1.9e6, 0.25))
    detuning_spread_sigma: float = 5.0e5
    spread_shape: str = "lorentzian"
    t1: float = 6.274e-3
    t2_alpha: float = 3.438e-6
    stretch_n: float = 1.5
    t2_beta: float = 68.12e-6
    t_rev: float | None = None
    t_dec: float | None = None
    n_revivals: int = 10
    tau_repol: float = 138.07e-6
    resonant_fraction: float = 0.25
    contrast_scale: float = 0.05
    n_subensembles: int = 600
    rabi_t2_reference: float = 1.175e-6
    rabi_reference_frequency: float = 2.5e6
    rabi_loss_per_cycle: float = 0.1
    z_thermal: float = 0.0
    pl_base: float = 1.0
    damping: bool = True

    def __post_init__(self):
        positive = ("b0_field", "center_frequency", "gamma_e", "t1", "t2_alpha", "stretch_n", "t2_beta",
                    "tau_repol", "rabi_t2_reference", "rabi_reference_frequency", "pl_base")
        for name in positive:
            value = getattr(self, name)
            if not (value > 0) or not math.isfinite(value):
                raise ConfigError(f"ensemble.{name} must be positive, got {value!r}")
        for name in ("t_rev", "t_dec"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"ensemble.{name} must be positive, got {value!r}")
        for name in ("rabi_coefficient", "detuning_spread_sigma", "rabi_loss_per_cycle", "contrast_scale"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"ensemble.{name} must be non-negative, got {getattr(self, name)!r}")
        if not 0 < self.resonant_fraction <= 1:
            raise ConfigError(f"ensemble.resonant_fraction must lie in (0, 1], got {self.resonant_fraction!r}")
        if not self.hyperfine_lines:
            raise ConfigError("ensemble.hyperfine_lines must not be empty")
        weights = [w for _, w in self.hyperfine_lines]
        if any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
            raise ConfigError(f"ensemble.hyperfine_lines weights must be non-negative and sum to 1, got {weights}")
        if self.n_subensembles < 3 or self.n_subensembles < len(self.hyperfine_lines):
            raise ConfigError(f"ensemble.n_subensembles must be at least 3 and one per line, got {self.n_subensembles}")
        if self.spread_shape not in ("gaussian", "lorentzian"):
            raise ConfigError(f"ensemble.spread_shape must be 'gaussian' or 'lorentzian', got {self.spread_shape!r}")
        if not -1 <= self.z_thermal <= 1:
            raise ConfigError("ensemble.z_thermal must lie in [-1, 1]")
        if self.n_revivals < 0:
            raise ConfigError("ensemble.n_revivals must be non-negative")
        self.rabi_t2_intrinsic  # raises if the calibration point is unreachable

    @property
    def revival_period(self) -> float:
        """13C Larmor period unless set explicitly."""
        return self.t_rev if self.t_rev is not None else 1.0 / (GAMMA_C13 * self.b0_field)

    @property
    def revival_width(self) -> float:
        # each revival replicates the initial echo collapse
        return self.t_dec if self.t_dec is not None else self.t2_alpha

    @property
    def rabi_t2_intrinsic(self) -> float:
        """Zero-drive limit T20 of 1/T2_rabi = 1/T20 + c * f_rabi."""
        rate = 1.0 / self.rabi_t2_reference - self.rabi_loss_per_cycle * self.rabi_reference_frequency
        if rate <= 0:
            raise ConfigError("rabi_loss_per_cycle too large for the reference T2_rabi")
        return 1.0 / rate

    def rabi_t2(self, f_rabi: float) -> float:
        return 1.0 / (1.0 / self.rabi_t2_intrinsic + self.rabi_loss_per_cycle * abs(f_rabi))


@dataclass(frozen=True)
class EnsembleState:
    bloch: np.ndarray  # (n, 3)
    detuning: np.ndarray  # (n,) Hz
    weight: np.ndarray  # (n,)
    nonresonant_p0: float = 1.0
    elapsed_free_precession: float = 0.0

    @property
    def p0(self) -> np.ndarray:
        return 0.5 * (1.0 + self.bloch[:, 2])

    @property
    def mean_p0(self) -> float:
        return float(np.dot(self.weight, self.p0))

    def transverse_magnitude(self) -> float:
        """Magnitude of the weighted mean transverse vector."""
        mx = np.dot(self.weight, self.bloch[:, 0])
        my = np.dot(self.weight, self.bloch[:, 1])
        return float(math.hypot(mx, my))


@dataclass(frozen=True)
class PLTrace:
    t0: float
    dt: float
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("PLTrace.dt must be positive")
        if np.any(np.asarray(self.samples) < 0):
            raise ValueError("photoluminescence samples must be non-negative")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.samples))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t_s", "pl"])
            for t, v in zip(self.times, self.samples):
                writer.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "PLTrace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        t = np.array([float(r[0]) for r in rows])
        v = np.array([float(r[1]) for r in rows])
        dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        return cls(float(t[0]) if len(t) else 0.0, dt, v)


def stratified_quantiles(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def sample_detunings(cfg: EnsembleConfig) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic stratified detunings and weights for every member."""
    n_lines = len(cfg.hyperfine_lines)
    counts = [cfg.n_subensembles // n_lines] * n_lines
    for i in range(cfg.n_subensembles - sum(counts)):
        counts[i] += 1
    detunings, weights = [], []
    for (offset, line_weight), n in zip(cfg.hyperfine_lines, counts):
        q = stratified_quantiles(n)
        if cfg.spread_shape == "gaussian":
            spread = ndtri(q) * cfg.detuning_spread_sigma
        else:
            spread = np.tan(math.pi * (q - 0.5)) * cfg.detuning_spread_sigma
        detunings.append(offset + spread)
        weights.append(np.full(n, line_weight / n))
    return np.concatenate(detunings), np.concatenate(weights)


def init_ensemble(cfg: EnsembleConfig) -> EnsembleState:
    detuning, weight = sample_detunings(cfg)
    bloch = np.zeros((len(detuning), 3))
    bloch[:, 2] = 1.0
    return EnsembleState(bloch, detuning, weight, 1.0, 0.0)


def rabi_frequency_from_power(p: float, cfg: EnsembleConfig) -> float:
    if p < 0:
        raise ValueError(f"microwave power must be non-negative, got {p!r}")
    return cfg.rabi_coefficient * math.sqrt(p)


def _rotate(v: np.ndarray, axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation of each row of ``v`` about the matching unit ``axis``."""
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    dot = np.sum(axis * v, axis=1)[:, None]
    return v * c + np.cross(axis, v) * s + axis * dot * (1.0 - c)


def apply_mw_pulse(state: EnsembleState, duration: float, f_rabi: float, phase: float,
                   cfg: EnsembleConfig) -> EnsembleState:
    if duration < 0:
        raise ValueError("pulse duration must be non-negative")
    if duration == 0:
        return state
    delta = state.detuning
    drive = np.full_like(delta, f_rabi)
    vec = np.stack([-np.sin(phase) * drive, np.cos(phase) * drive, delta], axis=1)
    omega = np.sqrt(f_rabi ** 2 + delta ** 2)
    safe = np.where(omega > 0, omega, 1.0)
    axis = vec / safe[:, None]
    axis[omega == 0] = (0.0, 0.0, 1.0)
    bloch = _rotate(state.bloch, axis, 2 * math.pi * omega * duration)
    if cfg.damping and f_rabi > 0:
        decay = math.exp(-duration / cfg.rabi_t2(f_rabi))
        bloch[:, :2] *= decay
        bloch[:, 2] = cfg.z_thermal + (bloch[:, 2] - cfg.z_thermal) * decay
    return replace(state, bloch=bloch)


def echo_envelope(tau: float, cfg: EnsembleConfig) -> float:
    """Echo coherence factor for a free-precession time ``tau`` per arm.

    Stretched-exponential decay times a train of Gaussian revivals at
    multiples of the 13C Larmor period, normalized to 1 at tau = 0.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    t_rev, t_dec = cfg.revival_period, cfg.revival_width
    j = np.arange(cfg.n_revivals + 1)
    train = np.exp(-(((tau - j * t_rev) / t_dec) ** 2)).sum()
    norm = np.exp(-(((j * t_rev) / t_dec) ** 2)).sum()
    value = math.exp(-((tau / cfg.t2_beta) ** cfg.stretch_n)) * train / norm
    return float(min(max(value, 0.0), 1.0))


def free_evolve(state: EnsembleState, duration: float, echo_context: bool,
                cfg: EnsembleConfig) -> EnsembleState:
    """Precession about z plus relaxation.

    Outside an echo the transverse part decays with ``t2_alpha``. Inside an
    echo the free time only accumulates; the coherence loss of the whole
    echo is applied once by ``echo_refocus`` when the last gap closes.
    """
    if duration < 0:
        raise ValueError("free-evolution duration must be non-negative")
    if duration == 0:
        return state
    angle = 2 * math.pi * state.detuning * duration
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = state.bloch.T
    bloch = np.stack([x * c - y * s, x * s + y * c, z], axis=1)
    elapsed = state.elapsed_free_precession
    p0_nr = state.nonresonant_p0
    if echo_context:
        elapsed += duration
    elif cfg.damping:
        bloch[:, :2] *= math.exp(-duration / cfg.t2_alpha)
    if cfg.damping:
        relax = math.exp(-duration / cfg.t1)
        bloch[:, 2] = cfg.z_thermal + (bloch[:, 2] - cfg.z_thermal) * relax
        p_th = 0.5 * (1.0 + cfg.z_thermal)
        p0_nr = p_th + (p0_nr - p_th) * relax
    return replace(state, bloch=bloch, nonresonant_p0=p0_nr, elapsed_free_precession=elapsed)


def echo_refocus(state: EnsembleState, cfg: EnsembleConfig) -> EnsembleState:
    """Scale the transverse part by the echo envelope of the accumulated free time.

    The envelope argument is the per-arm time, half the accumulated free
    precession. Applying the loss in one step (rather than spreading a
    non-monotone envelope over the gaps) keeps an imperfect refocusing pulse
    from amplifying components that it swapped between z and the plane.
    """
    if state.elapsed_free_precession == 0:
        return state
    bloch = state.bloch.copy()
    if cfg.damping:
        bloch[:, :2] *= echo_envelope(state.elapsed_free_precession / 2, cfg)
    return replace(state, bloch=bloch, elapsed_free_precession=0.0)


def pl_level(state: EnsembleState, cfg: EnsembleConfig) -> float:
    p_res = state.mean_p0
    return cfg.pl_base * (1.0 + cfg.contrast_scale * (cfg.resonant_fraction * p_res
                                                      + (1.0 - cfg.resonant_fraction) * state.nonresonant_p0 - 1.0))


def pl_under_laser(state: EnsembleState, offsets: np.ndarray, cfg: EnsembleConfig) -> np.ndarray:
    """PL at ``offsets`` seconds after the laser switched on from ``state``.

    PL is linear in the populations, and every population recovers with the
    same time constant, so the weighted deficit decays as one exponential.
    """
    deficit = (cfg.resonant_fraction * (1.0 - state.mean_p0)
               + (1.0 - cfg.resonant_fraction) * (1.0 - state.nonresonant_p0))
    recover = np.exp(-np.asarray(offsets, dtype=float) / cfg.tau_repol)
    return cfg.pl_base * (1.0 - cfg.contrast_scale * deficit * recover)


def laser_evolve(state: EnsembleState, duration: float, dt: float,
                 cfg: EnsembleConfig) -> tuple[EnsembleState, PLTrace]:
    if not duration > 0 or not dt > 0:
        raise ValueError("laser_evolve needs positive duration and dt")
    offsets = np.arange(0.0, duration, dt)
    trace = PLTrace(0.0, dt, pl_under_laser(state, offsets, cfg))
    return repolarize(state, duration, cfg), trace


def repolarize(state: EnsembleState, duration: float, cfg: EnsembleConfig) -> EnsembleState:
    k = math.exp(-duration / cfg.tau_repol)
    bloch = state.bloch.copy()
    bloch[:, :2] *= k
    bloch[:, 2] = 1.0 - (1.0 - bloch[:, 2]) * k
    p0_nr = 1.0 - (1.0 - state.nonresonant_p0) * k
    return replace(state, bloch=bloch, nonresonant_p0=p0_nr, elapsed_free_precession=0.0)
