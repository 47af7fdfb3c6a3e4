"""Pulse protocols for pulsed ODMR and their compilation to TTL edge lists.

A cycle is laid out so that one physical laser pulse of
``laser_init_duration`` wraps across the period boundary::

    laser  ‾‾‾‾‾‾‾‾‾‾‾‾|______________________|‾‾‾‾‾‾‾
           init tail    buffer  MW...  buffer  readout head
    trig   ‾‾‾‾‾‾‾‾‾‾‾‾|____________________________________
                       ^ scope trigger (falling edge)

The readout head (``readout_duration`` long) at the end of cycle k and the
init tail at the start of cycle k+1 are the same laser pulse, so the pulse
that reads out one sequence also initializes the next.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)


class Channel(str, enum.Enum):
    LASER = "laser"
    MICROWAVE = "mw"
    TRIGGER = "trigger"


class ProtocolKind(str, enum.Enum):
    RABI = "rabi"
    RAMSEY = "ramsey"
    T1 = "t1"
    ECHO = "echo"
    REPOLARIZATION = "repolarization"


class ReferenceStrategy(str, enum.Enum):
    MAX_POLARIZED = "max_polarized"
    PARTIAL_DEPOLARIZED = "partial_depolarized"


class SequenceError(ValueError):
    """Raised for malformed protocols or sequences that cannot be compiled."""


@dataclass(frozen=True)
class TimingConfig:
    laser_init_duration: float = 1.5e-3
    readout_duration: float = 200e-6
    buffer_after_laser: float = 1e-6
    compile_resolution: float = 2e-9

    def __post_init__(self):
        for name in ("laser_init_duration", "readout_duration", "buffer_after_laser", "compile_resolution"):
            value = getattr(self, name)
            if not value > 0 or not math.isfinite(value):
                raise SequenceError(f"{name} must be a positive finite time, got {value!r}")
        if self.readout_duration >= self.laser_init_duration:
            raise SequenceError("readout_duration must be shorter than laser_init_duration")

    @property
    def init_tail(self) -> float:
        """Laser-on time between the period start and the trigger edge."""
        return self.laser_init_duration - self.readout_duration


@dataclass(frozen=True)
class Segment:
    channel: Channel
    start: float
    duration: float
    mw_phase: float = 0.0

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class PulseSequence:
    protocol_kind: ProtocolKind
    segments: tuple[Segment, ...]
    reference_strategy: ReferenceStrategy
    swept_symbol: str
    swept_value: float
    period: float
    cycle_period: float
    dark: float
    export_readout_trace: bool = False

    def on(self, channel: Channel) -> list[Segment]:
        return sorted((s for s in self.segments if s.channel == channel), key=lambda s: s.start)

    @property
    def trigger_time(self) -> float:
        trig = self.on(Channel.TRIGGER)
        return trig[0].end if trig else math.nan

    @property
    def mw_on_time(self) -> float:
        return sum(s.duration for s in self.on(Channel.MICROWAVE))


@dataclass(frozen=True)
class Violation:
    channel: Channel | None
    time: float
    message: str

    def __str__(self):
        where = self.channel.value if self.channel is not None else "sequence"
        return f"{where} @ {self.time:.9e} s: {self.message}"


@dataclass(frozen=True)
class ChannelTimeline:
    """Per-channel edge lists quantized to ``resolution``.

    Edge times are stored as integer ticks. ``mw_pulses`` keeps the
    individual (start, end, phase) microwave pulses, since two abutting pulses
    with different phases form a single high interval on the switch channel.
    """

    resolution: float
    total_ticks: int
    edges: dict[Channel, tuple[tuple[int, int], ...]]
    mw_pulses: tuple[tuple[int, int, float], ...] = ()
    protocol_kind: ProtocolKind = ProtocolKind.RABI
    reference_strategy: ReferenceStrategy = ReferenceStrategy.MAX_POLARIZED
    cycle_ticks: int = 0
    echo_gaps: tuple[tuple[int, int], ...] = field(default=())

    @property
    def total_period(self) -> float:
        return self.total_ticks * self.resolution

    def edge_times(self, channel: Channel) -> list[tuple[float, str]]:
        return [(t * self.resolution, "high" if lvl else "low") for t, lvl in self.edges.get(channel, ())]

    def intervals(self, channel: Channel) -> list[tuple[int, int]]:
        """High intervals in ticks, clipped to the period."""
        out = []
        start = None
        for tick, level in self.edges.get(channel, ()):
            if level and start is None:
                start = tick
            elif not level and start is not None:
                out.append((start, tick))
                start = None
        if start is not None:
            out.append((start, self.total_ticks))
        return out

    def to_edge_file(self, path: str | Path) -> None:
        lines = [f"# total_period_ns {self.total_ticks * self.resolution * 1e9:.3f}"]
        for channel in Channel:
            for tick, level in self.edges.get(channel, ()):
                lines.append(f"{channel.value} {tick * self.resolution * 1e9:.3f} {'high' if level else 'low'}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_edge_file(cls, path: str | Path, resolution: float = 2e-9) -> "ChannelTimeline":
        """Read an edge-list file. Phases and protocol metadata are not stored in the file."""
        edges: dict[Channel, list[tuple[int, int]]] = {}
        total_ticks = None
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, value = line[1:].split()
                if key == "total_period_ns":
                    total_ticks = round(float(value) * 1e-9 / resolution)
                continue
            name, t_ns, level = line.split()
            tick = round(float(t_ns) * 1e-9 / resolution)
            edges.setdefault(Channel(name), []).append((tick, 1 if level == "high" else 0))
        if total_ticks is None:
            raise SequenceError(f"{path}: missing total_period_ns header")
        return cls(resolution=resolution, total_ticks=total_ticks,
                   edges={ch: tuple(e) for ch, e in edges.items()}, cycle_ticks=total_ticks)


def _check_nonnegative(**durations: float) -> None:
    for name, value in durations.items():
        if not (value >= 0) or not math.isfinite(value):
            raise SequenceError(f"{name} must be a non-negative finite time, got {value!r}")


def _assemble(kind: ProtocolKind, mw_pattern: Sequence[tuple[float, float, float]], dark: float | None,
              timing: TimingConfig, strategy: ReferenceStrategy, swept_symbol: str, swept_value: float,
              export_trace: bool = False) -> PulseSequence:
    """Lay out one cycle (or a MW/no-MW pair) around a microwave pattern.

    ``mw_pattern`` holds (offset, duration, phase) relative to the first pulse;
    zero-length pulses are dropped. ``dark`` overrides the laser-off duration
    for all-optical protocols.
    """
    pulses = [(off, dur, ph) for off, dur, ph in mw_pattern if dur > 0]
    if dark is None:
        window = max((off + dur for off, dur, _ in pulses), default=0.0)
        dark = window + 2 * timing.buffer_after_laser
    tail = timing.init_tail
    cycle = timing.laser_init_duration + dark

    def one_cycle(t0: float, with_mw: bool) -> list[Segment]:
        segs = [Segment(Channel.LASER, t0, tail)]
        if with_mw:
            segs += [Segment(Channel.MICROWAVE, t0 + tail + timing.buffer_after_laser + off, dur, ph)
                     for off, dur, ph in pulses]
        segs.append(Segment(Channel.LASER, t0 + tail + dark, timing.readout_duration))
        return segs

    segments = one_cycle(0.0, True)
    segments.append(Segment(Channel.TRIGGER, 0.0, tail))
    period = cycle
    if strategy is ReferenceStrategy.PARTIAL_DEPOLARIZED:
        segments += one_cycle(cycle, False)
        period = 2 * cycle
    return PulseSequence(kind, tuple(segments), strategy, swept_symbol, swept_value,
                         period=period, cycle_period=cycle, dark=dark, export_readout_trace=export_trace)


def build_rabi(tau_mw: float, timing: TimingConfig = TimingConfig(),
               strategy: ReferenceStrategy = ReferenceStrategy.MAX_POLARIZED) -> PulseSequence:
    _check_nonnegative(tau_mw=tau_mw)
    return _assemble(ProtocolKind.RABI, [(0.0, tau_mw, 0.0)], None, timing, strategy, "tau_mw", tau_mw)


def build_ramsey(t_free: float, t_pi2: float, timing: TimingConfig = TimingConfig(),
                 strategy: ReferenceStrategy = ReferenceStrategy.MAX_POLARIZED) -> PulseSequence:
    _check_nonnegative(t_free=t_free, t_pi2=t_pi2)
    if t_pi2 <= 0:
        raise SequenceError("t_pi2 must be positive")
    pattern = [(0.0, t_pi2, 0.0), (t_pi2 + t_free, t_pi2, 0.0)]
    return _assemble(ProtocolKind.RAMSEY, pattern, None, timing, strategy, "t_free", t_free)


def build_t1(t_dark: float, timing: TimingConfig = TimingConfig(),
             strategy: ReferenceStrategy = ReferenceStrategy.MAX_POLARIZED) -> PulseSequence:
    _check_nonnegative(t_dark=t_dark)
    return _assemble(ProtocolKind.T1, [], t_dark, timing, strategy, "t_dark", t_dark)


def build_echo(t_deph: float, t_reph: float, t_pi2: float, t_pi: float,
               timing: TimingConfig = TimingConfig(),
               strategy: ReferenceStrategy = ReferenceStrategy.MAX_POLARIZED,
               swept_symbol: str = "t_reph") -> PulseSequence:
    """pi/2 - t_deph - pi - t_reph - pi/2, closing pulse phase-inverted.

    The closing pi/2 carries phase pi so a perfectly refocused spin ends in
    the bright-state complement (z = -1), making the echo a PL dip.
    """
    _check_nonnegative(t_deph=t_deph, t_reph=t_reph, t_pi2=t_pi2, t_pi=t_pi)
    if not math.isclose(t_pi, 2 * t_pi2, rel_tol=1e-9):
        logger.warning("echo t_pi=%g s is not twice t_pi2=%g s", t_pi, t_pi2)
    pattern = [
        (0.0, t_pi2, 0.0),
        (t_pi2 + t_deph, t_pi, 0.0),
        (t_pi2 + t_deph + t_pi + t_reph, t_pi2, math.pi),
    ]
    value = t_reph if swept_symbol == "t_reph" else t_deph
    return _assemble(ProtocolKind.ECHO, pattern, None, timing, strategy, swept_symbol, value)


def build_repolarization(t_dark: float, timing: TimingConfig = TimingConfig()) -> PulseSequence:
    _check_nonnegative(t_dark=t_dark)
    return _assemble(ProtocolKind.REPOLARIZATION, [], t_dark, timing, ReferenceStrategy.MAX_POLARIZED,
                     "t_dark", t_dark, export_trace=True)


def without_microwave(seq: PulseSequence) -> PulseSequence:
    """Same timing with every microwave segment removed (serial reference leg)."""
    return replace(seq, segments=tuple(s for s in seq.segments if s.channel != Channel.MICROWAVE))


# gaps shorter than this are float residue of segment arithmetic, far below one tick
_GAP_EPS = 1e-12


def _merge(intervals: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[list[float]] = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1] + _GAP_EPS:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


def validate(seq: PulseSequence) -> list[Violation]:
    out: list[Violation] = []
    eps = 1e-15
    for s in seq.segments:
        if not s.duration > 0:
            out.append(Violation(s.channel, s.start, f"non-positive duration {s.duration!r}"))
        if s.start < -eps or s.end > seq.period + eps:
            out.append(Violation(s.channel, s.start, "segment outside the sequence period"))

    for channel in Channel:
        segs = seq.on(channel)
        for prev, cur in zip(segs, segs[1:]):
            if cur.start < prev.end - eps:
                out.append(Violation(channel, cur.start, "overlaps previous segment on the same channel"))

    laser = _merge((s.start, s.end) for s in seq.on(Channel.LASER))
    for mw in seq.on(Channel.MICROWAVE):
        for a, b in laser:
            # strictly inside a dark interval: touching a laser edge is also a violation
            if mw.start <= b + eps and mw.end >= a - eps:
                out.append(Violation(Channel.MICROWAVE, mw.start,
                                     f"microwave segment touches laser-on interval [{a:.9e}, {b:.9e}]"))
                break

    darks = _dark_intervals(laser, seq.period)
    triggers = seq.on(Channel.TRIGGER)
    if len(triggers) != 1:
        out.append(Violation(Channel.TRIGGER, 0.0, f"expected exactly one trigger segment per period, found {len(triggers)}"))
    if seq.reference_strategy is ReferenceStrategy.PARTIAL_DEPOLARIZED:
        expected = 2 if seq.dark > 0 else 0
        if len(darks) != expected:
            out.append(Violation(Channel.LASER, 0.0,
                                 f"partially depolarized reference needs two init/readout cycles, found {len(darks)}"))
        elif any(abs((b - a) - seq.dark) > _GAP_EPS for a, b in darks):
            out.append(Violation(Channel.LASER, 0.0, "partially depolarized reference needs two init/readout "
                                 "cycles with equal dark gaps"))
        elif darks:
            second = darks[1]
            for mw in seq.on(Channel.MICROWAVE):
                if mw.start >= second[0]:
                    out.append(Violation(Channel.MICROWAVE, mw.start, "microwave segment in the reference half-cycle"))
        if not math.isclose(seq.period, 2 * seq.cycle_period, rel_tol=1e-12):
            out.append(Violation(None, seq.period, "pair period is not twice the cycle period"))
    elif len(darks) > 1:
        out.append(Violation(Channel.LASER, darks[1][0], "maximally polarized sequence has more than one dark interval"))
    return out


def _dark_intervals(laser: list[tuple[float, float]], period: float) -> list[tuple[float, float]]:
    out = []
    cursor = 0.0
    for a, b in laser:
        if a > cursor + _GAP_EPS:
            out.append((cursor, a))
        cursor = max(cursor, b)
    if cursor < period - _GAP_EPS:
        out.append((cursor, period))
    return out


def compile(seq: PulseSequence, timing: TimingConfig = TimingConfig()) -> ChannelTimeline:  # noqa: A001
    problems = validate(seq)
    if problems:
        raise SequenceError("invalid sequence: " + "; ".join(map(str, problems)))
    res = timing.compile_resolution

    def q(t: float) -> int:
        return int(math.floor(t / res + 0.5))

    edges: dict[Channel, tuple[tuple[int, int], ...]] = {}
    pulses: list[tuple[int, int, float]] = []
    for channel in Channel:
        ticked = []
        for s in seq.on(channel):
            a, b = q(s.start), q(s.end)
            if b - a < 1:
                raise SequenceError(f"{channel.value} segment at {s.start:.9e} s is shorter than one "
                                    f"{res:g} s tick")
            ticked.append((a, b, s.mw_phase))
        merged: list[list] = []
        for a, b, ph in ticked:
            if merged and a <= merged[-1][1] and (channel != Channel.MICROWAVE or ph == merged[-1][2]):
                merged[-1][1] = max(merged[-1][1], b)
            else:
                merged.append([a, b, ph])
        ch_edges: list[tuple[int, int]] = []
        for a, b, ph in merged:
            if ch_edges and ch_edges[-1] == (a, 0):
                ch_edges.pop()  # abutting pulses with a phase jump stay one high level
            else:
                ch_edges.append((a, 1))
            ch_edges.append((b, 0))
            if channel == Channel.MICROWAVE:
                pulses.append((a, b, ph))
        total = q(seq.period)
        # the period-closing laser edge belongs to the next cycle
        if ch_edges and ch_edges[-1] == (total, 0) and channel == Channel.LASER:
            ch_edges.pop()
        edges[channel] = tuple(ch_edges)

    echo_gaps: tuple[tuple[int, int], ...] = ()
    if seq.protocol_kind is ProtocolKind.ECHO:
        mw = seq.on(Channel.MICROWAVE)
        echo_gaps = tuple((q(p.end), q(n.start)) for p, n in zip(mw, mw[1:]) if q(n.start) > q(p.end))
    return ChannelTimeline(res, q(seq.period), edges, tuple(pulses), seq.protocol_kind,
                           seq.reference_strategy, q(seq.cycle_period), echo_gaps)


def decompile(timeline: ChannelTimeline) -> dict[Channel, list[float]]:
    """High-interval durations per channel, in seconds."""
    return {ch: [(b - a) * timeline.resolution for a, b in timeline.intervals(ch)] for ch in Channel}
