"""Parameter sweeps, readout windows and the contrast of each sweep point.

Each sweep point owns an independent simulated rig seeded from
(root seed, point index), so serial and parallel execution agree bit for bit.
The slow baseline drift is the one thing that links points: its value at the
start of every averaging block is drawn up front along the acquisition order,
which keeps the shared drift history independent of how points are scheduled.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nv_physics as nv
from .analysis import FitReport, fit_repolarization
from .instruments import (ApdConfig, AveragedWaveform, DriftMode, DriftState, ScopeConfig, SimulatedRig, TriggerStarvation,
                          scope_acquire)
from .pulse_seq import (PulseSequence, ReferenceStrategy, SequenceError, TimingConfig, build_echo, build_rabi,
                        build_ramsey, build_repolarization, build_t1, compile, validate, without_microwave)

logger = logging.getLogger(__name__)

WINDOW_MARGIN = 10e-6  # record slack either side of the windows


class AcquisitionError(RuntimeError):
    pass


class ZeroReferenceError(ZeroDivisionError):
    pass


def contrast(i_sig: float, i_ref: float) -> float:
    """Percent contrast (i_sig / i_ref - 1) * 100."""
    if i_ref == 0:
        raise ZeroReferenceError("reference intensity is zero; contrast undefined")
    return (i_sig / i_ref - 1.0) * 100.0


@dataclass(frozen=True)
class WindowSpec:
    ref_start: float
    ref_end: float
    sig_start: float
    sig_end: float

    def __post_init__(self):
        if not (self.ref_end > self.ref_start and self.sig_end > self.sig_start):
            raise ValueError("windows must have positive length")
        if self.ref_start < self.sig_end and self.sig_start < self.ref_end:
            raise ValueError("reference and signal windows overlap")


def extract_windows(w: AveragedWaveform, spec: WindowSpec) -> tuple[float, float]:
    """Means over the half-open windows; returns (i_ref, i_sig)."""
    t = w.times
    lo, hi = t[0], t[-1] + w.dt
    tol = 1e-9 * w.dt
    for a, b in ((spec.ref_start, spec.ref_end), (spec.sig_start, spec.sig_end)):
        if a < lo - tol or b > hi + tol:
            raise AcquisitionError(f"window [{a:.6g}, {b:.6g}) s lies outside the record [{lo:.6g}, {hi:.6g}) s")

    def mean(a: float, b: float) -> float:
        # grid indices avoid float jitter at the window edges
        i0 = int(math.ceil((a - w.t_rel_trigger) / w.dt - 1e-6))
        i1 = int(math.ceil((b - w.t_rel_trigger) / w.dt - 1e-6))
        i0, i1 = max(i0, 0), min(i1, len(w.samples))
        if i1 <= i0:
            raise AcquisitionError(f"window [{a:.6g}, {b:.6g}) s holds no samples")
        return float(np.mean(w.samples[i0:i1]))

    return mean(spec.ref_start, spec.ref_end), mean(spec.sig_start, spec.sig_end)


def default_windows(seq: PulseSequence, timing: TimingConfig) -> WindowSpec:
    """Readout windows relative to the trigger (falling edge of the init pulse)."""
    ro = timing.readout_duration
    if seq.reference_strategy is ReferenceStrategy.PARTIAL_DEPOLARIZED:
        return WindowSpec(seq.cycle_period + seq.dark, seq.cycle_period + seq.dark + ro, seq.dark, seq.dark + ro)
    return WindowSpec(-ro, 0.0, seq.dark, seq.dark + ro)


def record_geometry(seqs: Sequence[PulseSequence], timing: TimingConfig, sample_rate: float,
                    n_averages: int) -> ScopeConfig:
    """Scope setting whose record covers both windows of every given sequence.

    Sweeps call this per point: a record sized for the longest dark time
    would, through the holdoff, skip most triggers of the short points.
    """
    windows = [default_windows(s, timing) for s in seqs]
    start = min(min(w.ref_start, w.sig_start) for w in windows) - WINDOW_MARGIN
    start = max(start, -timing.init_tail)
    end = max(max(w.ref_end, w.sig_end) for w in windows) + WINDOW_MARGIN
    pre = int(math.ceil(-start * sample_rate)) if start < 0 else 0
    length = pre + int(math.ceil(end * sample_rate))
    return ScopeConfig(record_length=length, sample_rate=sample_rate, n_averages=n_averages,
                       pretrigger_fraction=pre / length)


@dataclass
class SweepResult:
    protocol_kind: str
    swept_values: np.ndarray
    i_sig: np.ndarray
    i_ref: np.ndarray
    contrast_percent: np.ndarray
    n_averages: int
    strategy: str
    seed: int
    config_hash: str = ""
    metadata: dict[str, str] = field(default_factory=dict)
    waveforms: list[AveragedWaveform] = field(default_factory=list, repr=False)

    def __post_init__(self):
        for name in ("swept_values", "i_sig", "i_ref", "contrast_percent"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.swept_values)
        if not (len(self.i_sig) == len(self.i_ref) == len(self.contrast_percent) == n):
            raise ValueError("SweepResult needs one row per swept value")

    def to_csv(self, path: str | Path) -> None:
        header = {
            "protocol": self.protocol_kind,
            "strategy": self.strategy,
            "n_averages": str(self.n_averages),
            "seed": str(self.seed),
            "config_hash": self.config_hash,
        }
        header.update(self.metadata)
        with open(path, "w", newline="") as fh:
            for key, value in header.items():
                fh.write(f"# {key}: {value}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["swept_value_s", "i_ref_v", "i_sig_v", "contrast_pct"])
            for row in zip(self.swept_values, self.i_ref, self.i_sig, self.contrast_percent):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SweepResult":
        meta: dict[str, str] = {}
        rows = []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("# "):
                    key, _, value = line[2:].rstrip("\n").partition(": ")
                    meta[key] = value
                elif line.startswith("swept_value_s"):
                    continue
                elif line.strip():
                    rows.append([float(v) for v in line.split(",")])
        data = np.array(rows).reshape(-1, 4)
        core = {k: meta.pop(k) for k in ("protocol", "strategy", "n_averages", "seed", "config_hash")}
        return cls(core["protocol"], data[:, 0], data[:, 2], data[:, 1], data[:, 3], int(core["n_averages"]),
                   core["strategy"], int(core["seed"]), core["config_hash"], meta)


def config_hash(*parts) -> str:
    """Short stable digest of configuration dataclasses and plain values."""

    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {k: plain(v) for k, v in asdict(obj).items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        if isinstance(obj, dict):
            return {str(k): plain(v) for k, v in obj.items()}
        if isinstance(obj, float):
            return repr(obj)
        if hasattr(obj, "value"):
            return obj.value
        return obj

    blob = json.dumps([plain(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# protocol registry

Builder = Callable[[float, TimingConfig, ReferenceStrategy], PulseSequence]


def _rabi(value, timing, strategy, **_):
    return build_rabi(value, timing, strategy)


def _ramsey(value, timing, strategy, t_pi2=100e-9, **_):
    return build_ramsey(value, t_pi2, timing, strategy)


def _t1(value, timing, strategy, **_):
    return build_t1(value, timing, strategy)


def _echo_rephase(value, timing, strategy, t_pi2=100e-9, t_deph=1e-6, **_):
    return build_echo(t_deph, value, t_pi2, 2 * t_pi2, timing, strategy, swept_symbol="t_reph")


def _echo_free(value, timing, strategy, t_pi2=100e-9, **_):
    return build_echo(value, value, t_pi2, 2 * t_pi2, timing, strategy, swept_symbol="t_free")


def _repolarization(value, timing, strategy, **_):
    return build_repolarization(value, timing)


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    builder: Callable
    swept_symbol: str
    model_id: str
    default_strategy: ReferenceStrategy
    sweep: tuple[float, float, int]  # start, stop, points
    description: str


PROTOCOLS: dict[str, ProtocolSpec] = {p.name: p for p in (
    ProtocolSpec("rabi", _rabi, "tau_mw", "rabi2tone", ReferenceStrategy.MAX_POLARIZED,
                 (0.0, 2e-6, 51), "single microwave pulse of varied length"),
    ProtocolSpec("ramsey", _ramsey, "t_free", "ramsey", ReferenceStrategy.MAX_POLARIZED,
                 (0.0, 2e-6, 51), "pi/2 - free precession - pi/2"),
    ProtocolSpec("t1", _t1, "t_dark", "exp_decay", ReferenceStrategy.MAX_POLARIZED,
                 (0.0, 30e-3, 31), "two laser pulses with a varied dark gap"),
    ProtocolSpec("echo-rephase", _echo_rephase, "t_reph", "extremum", ReferenceStrategy.MAX_POLARIZED,
                 (0.0, 2e-6, 51), "Hahn echo with fixed dephasing and varied rephasing time"),
    ProtocolSpec("echo-t2", _echo_free, "t_free", "stretched_exp", ReferenceStrategy.MAX_POLARIZED,
                 (0.0, 10e-6, 101), "Hahn echo with equal arms up to 10 us"),
    ProtocolSpec("echo-revivals", _echo_free, "t_free", "revival_train", ReferenceStrategy.PARTIAL_DEPOLARIZED,
                 (0.0, 200e-6, 401), "Hahn echo with equal arms up to 200 us, 13C revivals"),
    ProtocolSpec("repolarization", _repolarization, "t_dark", "single_exp_repol", ReferenceStrategy.MAX_POLARIZED,
                 (0.0, 0.0, 1), "laser recovery trace after a long dark gap"),
)}


# ----------------------------------------------------------------------------
# sweeps

@dataclass(frozen=True)
class RigSettings:
    """Everything a sweep point needs besides the swept value."""
    ensemble: nv.EnsembleConfig = field(default_factory=nv.EnsembleConfig)
    apd: ApdConfig = field(default_factory=ApdConfig)
    drift: DriftState = field(default_factory=DriftState)
    timing: TimingConfig = field(default_factory=TimingConfig)
    f_rabi: float = 2.5e6
    n_averages: int = 50


def point_seed(root: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root, spawn_key=(index,))


def _drift_starts(drift: DriftState, n_blocks: int, cycles_per_block: int, root: int) -> list[float]:
    """Offset at the start of each averaging block, in acquisition order."""
    rng = np.random.default_rng(np.random.SeedSequence(root, spawn_key=(2 ** 31 - 1,)))
    starts, offset = [], drift.offset
    for _ in range(n_blocks):
        starts.append(offset)
        if drift.step_sigma > 0:
            offset = float(np.clip(offset + rng.normal(0.0, drift.step_sigma * math.sqrt(cycles_per_block)),
                                   -drift.clamp, drift.clamp))
    return starts


def _new_rig(seq: PulseSequence, settings: RigSettings, drift_offset: float, seed) -> SimulatedRig:
    drift = replace(settings.drift, offset=drift_offset)
    return SimulatedRig(compile(seq, settings.timing), settings.ensemble, settings.apd, drift, settings.f_rabi, seed)


def _point(task) -> tuple[float, float, AveragedWaveform | None, AveragedWaveform | None]:
    """Acquire one sweep point; returns (i_ref, i_sig, waveform, second waveform)."""
    mode, seq, settings, scope, windows, drift_offset, seed = task
    problems = validate(seq)
    if problems:
        raise SequenceError("; ".join(map(str, problems)))
    rig = _new_rig(seq, settings, drift_offset, seed)
    if mode == "serial":
        sig_wave = scope_acquire(rig, scope, "serial")
        rig.set_timeline(compile(without_microwave(seq), settings.timing))
        ref_wave = scope_acquire(rig, scope, "serial")
        _, i_sig = extract_windows(sig_wave, windows)
        _, i_ref = extract_windows(ref_wave, windows)
        return i_ref, i_sig, sig_wave, ref_wave
    wave = scope_acquire(rig, scope, seq.reference_strategy)
    i_ref, i_sig = extract_windows(wave, windows)
    return i_ref, i_sig, wave, None


def _run(builder: Builder, values, strategy, settings: RigSettings, seed: int, mode: str, sample_rate: float | None,
         workers: int, shuffle: bool, keep_waveforms: bool, protocol_name: str | None) -> SweepResult:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise AcquisitionError("a sweep needs at least one swept value")
    strategy = ReferenceStrategy(strategy)
    fs = sample_rate or settings.apd.sample_rate
    settings = replace(settings, apd=replace(settings.apd, sample_rate=fs))
    seqs = []
    for v in values:
        try:
            seqs.append(builder(float(v), settings.timing, strategy))
        except SequenceError as exc:
            raise SequenceError(f"swept value {v!r}: {exc}") from exc

    order = np.arange(len(values))
    if shuffle:
        order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2 ** 31 - 2,))).permutation(order)
    blocks = 2 if mode == "serial" else 1
    starts = _drift_starts(settings.drift, len(values), blocks * settings.n_averages, seed)
    drift_at = np.empty(len(values))
    drift_at[order] = starts

    tasks = []
    for i, seq in enumerate(seqs):
        windows = default_windows(seq, settings.timing)
        scope = record_geometry([seq], settings.timing, fs, settings.n_averages)
        tasks.append((mode, seq, settings, scope, windows, float(drift_at[i]), point_seed(seed, i)))

    results: list = [None] * len(tasks)
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for i, out in zip(order, pool.map(_point, [tasks[i] for i in order])):
                    results[i] = out
        else:
            for i in order:
                results[i] = _point(tasks[i])
    except (SequenceError, TriggerStarvation, AcquisitionError) as exc:
        raise type(exc)(f"{exc} (sweep {protocol_name or 'protocol'})") from exc

    i_ref = np.array([r[0] for r in results])
    i_sig = np.array([r[1] for r in results])
    c = np.array([contrast(s, r) for s, r in zip(i_sig, i_ref)])
    kind = seqs[0].protocol_kind.value
    label = "serial" if mode == "serial" else strategy.value
    result = SweepResult(protocol_name or kind, values, i_sig, i_ref, c, settings.n_averages, label, seed,
                         config_hash(settings, protocol_name or kind, label, list(values)))
    if keep_waveforms:
        result.waveforms = [w for r in results for w in r[2:] if w is not None]
    return result


def run_sweep(builder: Builder, values, strategy: ReferenceStrategy | str, settings: RigSettings, seed: int,
              sample_rate: float | None = None, workers: int = 1, shuffle: bool = False,
              keep_waveforms: bool = False, protocol_name: str | None = None) -> SweepResult:
    """Build, compile, acquire and window every swept value in ascending order.

    Under MaxPolarized both windows come from the single-readout record;
    under PartialDepolarized the signal comes from the microwave half and the
    reference from the no-microwave half of the same averaged record.
    """
    return _run(builder, values, strategy, settings, seed, "same", sample_rate, workers, shuffle,
                keep_waveforms, protocol_name)


def serial_reference_sweep(builder: Builder, values, settings: RigSettings, seed: int,
                           sample_rate: float | None = None, workers: int = 1, shuffle: bool = False,
                           keep_waveforms: bool = False, protocol_name: str | None = None) -> SweepResult:
    """Signal and reference from two consecutive averaged acquisitions.

    The first acquisition runs the protocol, the second the same timing with
    the microwave removed; both use the readout-head window. The drift keeps
    walking between the two, which is what this mode is meant to expose.
    """
    return _run(builder, values, ReferenceStrategy.MAX_POLARIZED, settings, seed, "serial", sample_rate, workers,
                shuffle, keep_waveforms, protocol_name)


def protocol_builder(name: str, **params) -> Builder:
    try:
        spec = PROTOCOLS[name]
    except KeyError:
        raise KeyError(f"unknown protocol {name!r}; known: {', '.join(PROTOCOLS)}") from None
    return partial(spec.builder, **params)


# ----------------------------------------------------------------------------
# repolarization

def repolarization_trace(settings: RigSettings, seed: int, t_dark: float | None = None,
                         sample_rate: float = 1e6, fit_span: float | None = None) -> nv.PLTrace:
    """Averaged PL recovery trace of the readout pulse.

    The trace starts at the rising laser edge after ``t_dark`` (default ten
    T1) and covers ``fit_span`` (default the whole laser pulse minus a margin).
    """
    timing = settings.timing
    if t_dark is None:
        t_dark = 10 * settings.ensemble.t1
    seq = build_repolarization(t_dark, timing)
    span = fit_span if fit_span is not None else timing.laser_init_duration - WINDOW_MARGIN
    end = seq.dark + span
    length = int(math.ceil(end * sample_rate)) + 1
    scope = ScopeConfig(record_length=length, sample_rate=sample_rate, n_averages=settings.n_averages)
    apd = replace(settings.apd, sample_rate=sample_rate)
    rig = SimulatedRig(compile(seq, timing), settings.ensemble, apd, settings.drift, settings.f_rabi,
                       point_seed(seed, 0))
    wave = scope_acquire(rig, scope, seq.reference_strategy)
    i0 = int(math.ceil((seq.dark - wave.t_rel_trigger) / wave.dt - 1e-6))
    i1 = min(len(wave.samples), i0 + int(math.floor(span * sample_rate)))
    pl = np.clip(wave.samples[i0:i1] / apd.responsivity, 0.0, None)
    return nv.PLTrace(0.0, wave.dt, pl)


def measure_repolarization(settings: RigSettings, seed: int, t_dark: float | None = None,
                           sample_rate: float = 1e6, fit_span: float | None = None
                           ) -> tuple[nv.PLTrace, FitReport]:
    """Recovery trace and its single-exponential fit."""
    trace = repolarization_trace(settings, seed, t_dark, sample_rate, fit_span)
    return trace, fit_repolarization(trace.times, trace.samples)


# ----------------------------------------------------------------------------
# drift comparison

DRIFT_STRATEGIES = ("max_polarized", "partial_depolarized", "serial")


def drift_offsets(settings: RigSettings, n_points: int, seed: int, serial: bool = False) -> np.ndarray:
    """Drift offset at the start of each point's averaging block, in sweep order."""
    blocks = 2 if serial else 1
    return np.array(_drift_starts(settings.drift, n_points, blocks * settings.n_averages, seed))


@dataclass
class DriftComparison:
    """One Rabi sweep under each referencing strategy, with its noise-free twin.

    ``noise_std`` is the standard deviation of the contrast about the
    noise-free, drift-free curve of the same strategy.
    """
    swept_values: np.ndarray
    sweeps: dict[str, SweepResult]
    clean: dict[str, np.ndarray]
    drift_std: float
    shot_noise: float

    @property
    def noise_std(self) -> dict[str, float]:
        return {k: float(np.std(self.sweeps[k].contrast_percent - self.clean[k])) for k in self.sweeps}

    @property
    def ratios(self) -> dict[str, float]:
        """Contrast noise of each strategy relative to the same-waveform one."""
        base = self.noise_std["max_polarized"]
        return {k: (v / base if base > 0 else math.inf) for k, v in self.noise_std.items()}

    @property
    def correlation(self) -> float:
        """Correlation of the raw signal and reference series of the same-waveform sweep."""
        r = self.sweeps["max_polarized"]
        if np.std(r.i_sig) == 0 or np.std(r.i_ref) == 0:
            return 0.0
        return float(np.corrcoef(r.i_sig, r.i_ref)[0, 1])

    def summary(self) -> str:
        lines = [f"drift_std_v: {self.drift_std!r}", f"shot_noise_after_averaging_v: {self.shot_noise!r}",
                 f"signal_reference_correlation: {self.correlation!r}"]
        for k in self.sweeps:
            lines.append(f"{k}.contrast_noise_std_pct: {self.noise_std[k]!r}")
            lines.append(f"{k}.ratio_to_max_polarized: {self.ratios[k]!r}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path: str | Path) -> None:
        cols = ["swept_value_s"]
        data = [self.swept_values]
        for k, r in self.sweeps.items():
            cols += [f"{k}.i_ref_v", f"{k}.i_sig_v", f"{k}.contrast_pct", f"{k}.clean_contrast_pct"]
            data += [r.i_ref, r.i_sig, r.contrast_percent, self.clean[k]]
        first = next(iter(self.sweeps.values()))
        with open(path, "w", newline="") as fh:
            for key, value in (("n_averages", first.n_averages), ("seed", first.seed),
                               ("config_hash", first.config_hash), ("drift_std_v", repr(self.drift_std)),
                               ("shot_noise_after_averaging_v", repr(self.shot_noise))):
                fh.write(f"# {key}: {value}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for row in zip(*data):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "DriftComparison":
        meta: dict[str, str] = {}
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                meta[key] = value
            elif line.strip():
                body.append(line)
        cols = body[0].split(",")
        data = np.array([[float(v) for v in line.split(",")] for line in body[1:]]).reshape(-1, len(cols))
        col = {name: data[:, i] for i, name in enumerate(cols)}
        xs = col["swept_value_s"]
        sweeps, clean = {}, {}
        for k in dict.fromkeys(c.split(".")[0] for c in cols[1:]):
            sweeps[k] = SweepResult("rabi", xs, col[f"{k}.i_sig_v"], col[f"{k}.i_ref_v"], col[f"{k}.contrast_pct"],
                                    int(meta["n_averages"]), k, int(meta["seed"]), meta["config_hash"])
            clean[k] = col[f"{k}.clean_contrast_pct"]
        return cls(xs, sweeps, clean, float(meta["drift_std_v"]), float(meta["shot_noise_after_averaging_v"]))


def drift_comparison(settings: RigSettings, values, seed: int, workers: int = 1,
                     builder: Builder | None = None) -> DriftComparison:
    """Run the Rabi sweep same-waveform, partial-depolarized and serial, plus noise-free twins."""
    builder = builder or protocol_builder("rabi")
    values = np.asarray(values, dtype=float)
    clean_settings = replace(settings, apd=replace(settings.apd, noise_sigma=0.0), drift=DriftState(),
                             n_averages=1)

    def sweep(strategy, s):
        if strategy == "serial":
            return serial_reference_sweep(builder, values, s, seed, workers=workers, protocol_name="rabi")
        return run_sweep(builder, values, strategy, s, seed, workers=workers, protocol_name="rabi")

    sweeps = {k: sweep(k, settings) for k in DRIFT_STRATEGIES}
    clean = {k: sweep(k, clean_settings).contrast_percent for k in DRIFT_STRATEGIES}
    offsets = drift_offsets(settings, len(values), seed)
    drift_std = float(np.std(offsets))
    if settings.drift.mode is DriftMode.MULTIPLICATIVE:
        drift_std *= settings.ensemble.pl_base * settings.apd.responsivity
    shot = settings.apd.noise_sigma / math.sqrt(settings.n_averages)
    return DriftComparison(values, sweeps, clean, drift_std, shot)
