"""Simulated signal chain: TTL playback, APD, baseline drift and a sampling scope.

The rig is a continuous sample stream. ``SimulatedRig`` plays a compiled
timeline cycle after cycle through the ensemble physics, turns the PL into
APD volts and hands out (volts, trigger) chunks; ``scope_acquire`` watches
the trigger channel and averages trigger-aligned records, just like the
on-board averaging of a storage scope.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np
from scipy.signal import lfilter

from . import nv_physics as nv
from .pulse_seq import Channel, ChannelTimeline, ReferenceStrategy

logger = logging.getLogger(__name__)

TTL_HIGH = 3.3  # volts on the trigger channel


class InstrumentError(RuntimeError):
    pass


class TriggerStarvation(InstrumentError):
    """Fewer triggers arrived than the requested number of averages."""


class Edge(str, enum.Enum):
    RISING = "rising"
    FALLING = "falling"


class DriftMode(str, enum.Enum):
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"


@dataclass(frozen=True)
class ApdConfig:
    responsivity: float = 1.0  # V per PL unit
    bandwidth: float = 10e6
    noise_sigma: float = 2e-3
    sample_rate: float = 5e6

    def __post_init__(self):
        for name in ("responsivity", "bandwidth", "sample_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"apd.{name} must be positive, got {getattr(self, name)!r}")
        # zero noise is allowed so noise-free closed loops are possible
        if not self.noise_sigma >= 0:
            raise ValueError(f"apd.noise_sigma must be non-negative, got {self.noise_sigma!r}")

    @property
    def smoothing(self) -> float:
        """Per-sample coefficient of the single-pole low-pass."""
        return 1.0 - math.exp(-2 * math.pi * self.bandwidth / self.sample_rate)


@dataclass(frozen=True)
class DriftState:
    offset: float = 0.0
    step_sigma: float = 0.0
    clamp: float = 0.0
    mode: DriftMode = DriftMode.ADDITIVE

    def __post_init__(self):
        if self.step_sigma < 0 or self.clamp < 0:
            raise ValueError("drift step_sigma and clamp must be non-negative")
        if abs(self.offset) > self.clamp + 1e-15:
            raise ValueError(f"drift offset {self.offset!r} exceeds clamp {self.clamp!r}")
        if self.mode is DriftMode.MULTIPLICATIVE and self.clamp >= 1:
            raise ValueError("multiplicative drift needs clamp < 1")

    def apply(self, volts: np.ndarray) -> np.ndarray:
        if self.mode is DriftMode.ADDITIVE:
            return volts + self.offset
        return volts * (1.0 + self.offset)


@dataclass(frozen=True)
class ScopeConfig:
    record_length: int
    sample_rate: float = 5e6
    n_averages: int = 50
    pretrigger_fraction: float = 0.0
    trigger_channel: Channel = Channel.TRIGGER
    trigger_edge: Edge = Edge.FALLING
    trigger_level: float = TTL_HIGH / 2
    holdoff: float | None = None

    def __post_init__(self):
        if self.record_length <= 0:
            raise ValueError("scope.record_length must be positive")
        if self.n_averages < 1:
            raise ValueError("scope.n_averages must be at least 1")
        if not 0 <= self.pretrigger_fraction < 1:
            raise ValueError("scope.pretrigger_fraction must lie in [0, 1)")
        if not self.sample_rate > 0:
            raise ValueError("scope.sample_rate must be positive")
        if self.holdoff is not None and self.holdoff < self.record_duration:
            raise ValueError("scope.holdoff must be at least the record duration")

    @property
    def record_duration(self) -> float:
        return self.record_length / self.sample_rate

    @property
    def effective_holdoff(self) -> float:
        return self.record_duration if self.holdoff is None else self.holdoff

    @property
    def pretrigger_samples(self) -> int:
        return int(round(self.pretrigger_fraction * self.record_length))


@dataclass(frozen=True)
class AveragedWaveform:
    t_rel_trigger: float
    dt: float
    samples: np.ndarray = field(repr=False)
    n_averaged: int
    strategy: ReferenceStrategy | str = ReferenceStrategy.MAX_POLARIZED

    @property
    def times(self) -> np.ndarray:
        return self.t_rel_trigger + self.dt * np.arange(len(self.samples))

    def to_csv(self, path: str | Path) -> None:
        strategy = getattr(self.strategy, "value", self.strategy)
        with open(path, "w", newline="") as fh:
            fh.write(f"# n_averaged: {self.n_averaged}\n")
            fh.write(f"# strategy: {strategy}\n")
            fh.write(f"# sample_rate: {1.0 / self.dt!r}\n")
            fh.write(f"# t_rel_trigger: {self.t_rel_trigger!r}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t_rel_trigger_s", "volts"])
            for t, v in zip(self.times, self.samples):
                writer.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "AveragedWaveform":
        meta, rows = {}, []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, value = line[1:].partition(":")
                    meta[key.strip()] = value.strip()
                elif line.startswith("t_rel"):
                    continue
                elif line.strip():
                    rows.append(float(line.split(",")[1]))
        strategy = meta["strategy"]
        try:
            strategy = ReferenceStrategy(strategy)
        except ValueError:
            pass
        return cls(float(meta["t_rel_trigger"]), 1.0 / float(meta["sample_rate"]), np.array(rows),
                   int(meta["n_averaged"]), strategy)


def apd_transduce(trace: nv.PLTrace, apd: ApdConfig, seed=None, zi: float | None = None) -> np.ndarray:
    """PL samples to volts: single-pole low-pass, then white Gaussian noise.

    The filter assumes the input sample spacing is ``1 / apd.sample_rate``.
    ``zi`` is the filter output just before the first sample; by default the
    filter starts settled on the first input.
    """
    x = apd.responsivity * np.asarray(trace.samples, dtype=float)
    return _transduce(x, apd, np.random.default_rng(seed), zi)[0]


def _transduce(x: np.ndarray, apd: ApdConfig, rng: np.random.Generator,
               zi: float | None) -> tuple[np.ndarray, float]:
    a = apd.smoothing
    prev = x[0] if zi is None else zi
    if a < 1.0 and len(x):
        y, zf = lfilter([a], [1.0, a - 1.0], x, zi=[(1.0 - a) * prev])
        last = float(y[-1])
    else:
        y = x.copy()
        last = float(y[-1]) if len(y) else prev
    if apd.noise_sigma > 0:
        y = y + rng.normal(0.0, apd.noise_sigma, len(y))
    return y, last


def drift_step(drift: DriftState, dt: float, seed=None) -> DriftState:
    """Clamped Gaussian random walk.

    ``dt`` counts steps, so the offset moves by N(0, step_sigma * sqrt(dt));
    the rig takes one step per period.
    """
    if not dt > 0:
        raise ValueError("drift_step needs dt > 0")
    if drift.step_sigma == 0:
        return drift
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    offset = drift.offset + rng.normal(0.0, drift.step_sigma * math.sqrt(dt))
    return replace(drift, offset=float(np.clip(offset, -drift.clamp, drift.clamp)))


def detect_trigger(samples: np.ndarray, cfg: ScopeConfig, previous: float | None = None,
                   start_index: int = 0, last_trigger: int | None = None) -> list[int]:
    """Indices of accepted trigger crossings.

    A falling trigger fires on the first sample at or below the level after a
    sample above it (rising: mirrored). Crossings closer than the holdoff to
    the previous accepted trigger are ignored. ``previous``, ``start_index``
    and ``last_trigger`` let a caller feed a stream in chunks.
    """
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        return []
    before = np.concatenate(([s[0] if previous is None else previous], s[:-1]))
    if cfg.trigger_edge is Edge.FALLING:
        hits = np.flatnonzero((before > cfg.trigger_level) & (s <= cfg.trigger_level))
    else:
        hits = np.flatnonzero((before < cfg.trigger_level) & (s >= cfg.trigger_level))
    holdoff = int(math.ceil(cfg.effective_holdoff * cfg.sample_rate - 1e-9))
    accepted = []
    last = last_trigger
    for idx in hits + start_index:
        if last is None or idx - last >= holdoff:
            accepted.append(int(idx))
            last = int(idx)
    return accepted


@dataclass
class _Plan:
    """Timeline flattened into contiguous pieces over one period, in seconds."""
    period: float
    pieces: list[tuple[str, float, float, float, bool]]  # kind, start, end, phase, echo
    trigger: list[tuple[float, float]]


def _plan(timeline: ChannelTimeline) -> _Plan:
    for channel in (Channel.LASER, Channel.TRIGGER):
        if channel not in timeline.edges:
            raise InstrumentError(f"timeline has no {channel.value} channel")
    res = timeline.resolution
    total = timeline.total_ticks
    laser = timeline.intervals(Channel.LASER)
    # the period starts lit: the readout pulse of the previous cycle continues
    lit = [(0, laser[0][1])] if laser and laser[0][0] == 0 else []
    lit += [iv for iv in laser if iv[0] != 0]
    marks = {0, total}
    for a, b in lit:
        marks.update((a, b))
    for a, b, _ in timeline.mw_pulses:
        marks.update((a, b))
    echo = set(timeline.echo_gaps)
    last_gap_end = max((b for _, b in echo), default=None)
    pieces = []
    cuts = sorted(marks)
    for a, b in zip(cuts, cuts[1:]):
        if any(la <= a and b <= lb for la, lb in lit):
            pieces.append(("laser", a * res, b * res, 0.0, False))
            continue
        mw = [p for p in timeline.mw_pulses if p[0] <= a and b <= p[1]]
        if mw:
            pieces.append(("mw", a * res, b * res, mw[0][2], False))
        else:
            in_echo = any(ga <= a and b <= gb for ga, gb in echo)
            pieces.append(("free", a * res, b * res, 0.0, in_echo))
            if in_echo and b == last_gap_end:
                pieces.append(("refocus", b * res, b * res, 0.0, True))
    trig = [(a * res, b * res) for a, b in timeline.intervals(Channel.TRIGGER)]
    return _Plan(total * res, pieces, trig)


@dataclass
class SimulatedRig:
    """Plays a timeline forever and yields one period of (volts, trigger) at a time.

    Sample ``k`` of the stream sits at ``k / sample_rate`` plus half a
    compile tick, so no sample lands exactly on a TTL edge and rounding
    cannot decide which side of an edge it reads. The drift is constant
    within a period and steps between periods.
    """

    timeline: ChannelTimeline
    ensemble: nv.EnsembleConfig
    apd: ApdConfig
    drift: DriftState = field(default_factory=DriftState)
    f_rabi: float = 2.5e6
    seed: int | np.random.SeedSequence | None = 0

    def __post_init__(self):
        self._plan = _plan(self.timeline)
        ss = self.seed if isinstance(self.seed, np.random.SeedSequence) else np.random.SeedSequence(self.seed)
        noise_ss, drift_ss = ss.spawn(2)
        self._noise_rng = np.random.default_rng(noise_ss)
        self._drift_rng = np.random.default_rng(drift_ss)
        self.state = nv.init_ensemble(self.ensemble)
        self._lit_for = 0.0  # time the current laser pulse has already been on
        self._filter_out: float | None = None
        self._cycle = 0
        self._next_sample = 0
        self._t0 = 0.0
        self._cache = None

    @property
    def sample_rate(self) -> float:
        return self.apd.sample_rate

    def set_timeline(self, timeline: ChannelTimeline) -> None:
        """Swap the played timeline at the next period boundary (serial referencing)."""
        self.timeline = timeline
        self._plan = _plan(timeline)
        self._cache = None

    def next_cycle(self) -> tuple[np.ndarray, np.ndarray]:
        fs = self.apd.sample_rate
        period = self._plan.period
        t_start = self._t0
        t_end = t_start + period
        first = self._next_sample
        phase = 0.5 * self.timeline.resolution
        last = int(math.ceil((t_end - phase) * fs - 1e-9))
        t = np.arange(first, last) / fs + phase - t_start
        pl, trig = self._evolve(t)
        volts, self._filter_out = _transduce(self.apd.responsivity * pl, self.apd, self._noise_rng, self._filter_out)
        volts = self.drift.apply(volts)
        self.drift = drift_step(self.drift, 1.0, self._drift_rng)
        self._t0 = t_end
        self._next_sample = last
        self._cycle += 1
        return volts, trig

    def stream(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        while True:
            yield self.next_cycle()

    def _trajectory(self):
        """Physics over one period from the current start state.

        Returns the laser pieces as (start, end, state at laser-on, time
        already lit) plus the end-of-period state and pending lit time. Once
        the repolarization has settled the start state repeats exactly, so
        the last result is reused when the start state is bit-identical.
        """
        key = (self.state.bloch.tobytes(), self.state.nonresonant_p0, self.state.elapsed_free_precession,
               self._lit_for)
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        cfg = self.ensemble
        state = self.state
        lit_for = self._lit_for
        lit_pieces = []
        for kind, a, b, phase, echo in self._plan.pieces:
            if kind == "laser":
                lit_pieces.append((a, b, state, lit_for))
                lit_for += b - a
                continue
            if lit_for > 0:
                state = nv.repolarize(state, lit_for, cfg)
                lit_for = 0.0
            if kind == "mw":
                state = nv.apply_mw_pulse(state, b - a, self.f_rabi, phase, cfg)
            elif kind == "refocus":
                state = nv.echo_refocus(state, cfg)
            else:
                state = nv.free_evolve(state, b - a, echo, cfg)
        result = (lit_pieces, state, lit_for)
        self._cache = (key, result)
        return result

    def _evolve(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pl = np.zeros_like(t)
        trig = np.zeros_like(t)
        for a, b in self._plan.trigger:
            trig[(t >= a) & (t < b)] = TTL_HIGH
        lit_pieces, self.state, self._lit_for = self._trajectory()
        for a, b, state, lit_for in lit_pieces:
            lo, hi = np.searchsorted(t, [a, b])
            pl[lo:hi] = nv.pl_under_laser(state, t[lo:hi] - a + lit_for, self.ensemble)
        return pl, trig


def run_cycle(timeline: ChannelTimeline, ensemble: nv.EnsembleConfig, apd: ApdConfig, drift: DriftState,
              seed=None, f_rabi: float = 2.5e6):
    """One period from a fresh, fully polarized ensemble.

    Returns (volts, trigger volts, ensemble state, drift state).
    """
    rig = SimulatedRig(timeline, ensemble, apd, drift, f_rabi, seed)
    volts, trig = rig.next_cycle()
    return volts, trig, rig.state, rig.drift


def scope_acquire(source, cfg: ScopeConfig, strategy: ReferenceStrategy | str = ReferenceStrategy.MAX_POLARIZED,
                  max_cycles: int | None = None) -> AveragedWaveform:
    """Average ``cfg.n_averages`` trigger-aligned records from a chunk stream.

    ``source`` is either an iterator of (volts, trigger) chunks or an object
    with ``next_cycle()``. Gives up with ``TriggerStarvation`` after
    ``max_cycles`` chunks (default: four per requested record, plus slack).
    """
    chunks = source.stream() if hasattr(source, "stream") else iter(source)
    pre = cfg.pretrigger_samples
    post = cfg.record_length - pre
    limit = max_cycles if max_cycles is not None else 4 * cfg.n_averages + 8
    acc = np.zeros(cfg.record_length)
    pending: list[int] = []
    taken = 0
    buf_v = np.empty(0)
    buf_start = 0  # stream index of buf[0]
    prev_level = None
    last_trig = None
    for n_chunk, (volts, trig) in enumerate(chunks):
        if n_chunk >= limit:
            break
        stream_index = buf_start + len(buf_v)
        found = detect_trigger(trig, cfg, prev_level, stream_index, last_trig)
        if len(trig):
            prev_level = float(trig[-1])
        if found:
            last_trig = found[-1]
        pending.extend(i for i in found if i - pre >= 0)
        buf_v = np.concatenate((buf_v, volts))
        while pending and taken < cfg.n_averages and pending[0] + post <= buf_start + len(buf_v):
            i = pending.pop(0)
            lo = i - pre - buf_start
            if lo < 0:
                continue  # record starts before the retained history
            acc += buf_v[lo:lo + cfg.record_length]
            taken += 1
        if taken == cfg.n_averages:
            break
        keep_from = (pending[0] - pre) if pending else (buf_start + len(buf_v) - pre)
        drop = max(0, keep_from - buf_start)
        buf_v = buf_v[drop:]
        buf_start += drop
    if taken < cfg.n_averages:
        raise TriggerStarvation(f"only {taken} of {cfg.n_averages} records triggered")
    return AveragedWaveform(-pre / cfg.sample_rate, 1.0 / cfg.sample_rate, acc / taken, taken, strategy)


class ScopeDriver(Protocol):
    """Boundary a hardware scope backend would implement."""

    def configure(self, cfg: ScopeConfig) -> None: ...

    def arm(self) -> None: ...

    def fetch_averaged_waveform(self) -> AveragedWaveform: ...


class SimulatedScope:
    """ScopeDriver backed by a ``SimulatedRig``."""

    def __init__(self, rig: SimulatedRig, strategy: ReferenceStrategy = ReferenceStrategy.MAX_POLARIZED):
        self.rig = rig
        self.strategy = strategy
        self.cfg: ScopeConfig | None = None
        self._armed = False

    def configure(self, cfg: ScopeConfig) -> None:
        if not math.isclose(cfg.sample_rate, self.rig.sample_rate, rel_tol=1e-12):
            raise InstrumentError("scope and APD sample rates differ; the simulator digitizes once")
        self.cfg = cfg
        self._armed = False

    def arm(self) -> None:
        if self.cfg is None:
            raise InstrumentError("configure the scope before arming it")
        self._armed = True

    def fetch_averaged_waveform(self) -> AveragedWaveform:
        if not self._armed:
            raise InstrumentError("scope not armed")
        self._armed = False
        return scope_acquire(self.rig, self.cfg, self.strategy)
