import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odmr_rig import nv_physics as nv
from odmr_rig.acquisition import (PROTOCOLS, AcquisitionError, DriftComparison, RigSettings, SweepResult, WindowSpec,
                                  ZeroReferenceError, contrast, default_windows, drift_comparison, extract_windows,
                                  measure_repolarization, protocol_builder, record_geometry, run_sweep,
                                  serial_reference_sweep)
from odmr_rig.analysis import FitError
from odmr_rig.instruments import ApdConfig, AveragedWaveform, DriftState
from odmr_rig.pulse_seq import ReferenceStrategy, SequenceError, TimingConfig, build_rabi

MP = ReferenceStrategy.MAX_POLARIZED
PD = ReferenceStrategy.PARTIAL_DEPOLARIZED
QUIET = RigSettings(apd=ApdConfig(noise_sigma=0.0), n_averages=1)
NOISY = RigSettings(apd=ApdConfig(noise_sigma=2e-3), n_averages=8)
DRIFTING = replace(NOISY, drift=DriftState(step_sigma=1e-3, clamp=0.05))
RABI = protocol_builder("rabi")
T1 = protocol_builder("t1")


# ----------------------------------------------------------------------------
# contrast and windows

def test_contrast_examples():
    assert contrast(1.0, 1.0) == 0.0
    assert contrast(0.99, 1.0) == pytest.approx(-1.0, rel=1e-12)


def test_contrast_zero_reference_is_explicit():
    with pytest.raises(ZeroReferenceError):
        contrast(1.0, 0.0)


def test_additive_offset_changes_contrast_scale_does_not():
    assert contrast(0.99 * 3, 3.0) == pytest.approx(contrast(0.99, 1.0), rel=1e-12)
    assert contrast(0.99 + 0.1, 1.1) != pytest.approx(contrast(0.99, 1.0), rel=1e-6)


def wave(samples, t0=-1e-4, dt=1e-6):
    return AveragedWaveform(t0, dt, np.asarray(samples, dtype=float), 1, MP)


def test_constant_waveform_windows():
    w = wave(np.full(300, 0.7))
    assert extract_windows(w, WindowSpec(-1e-4, 0.0, 2e-5, 1e-4)) == pytest.approx((0.7, 0.7), rel=1e-12)


def test_step_at_trigger_windows():
    w = wave(np.r_[np.full(100, 1.0), np.full(200, 0.5)])
    assert extract_windows(w, WindowSpec(-1e-4, 0.0, 0.0, 1e-4)) == (1.0, 0.5)


def test_windows_are_half_open():
    w = wave(np.arange(300.0))
    # [-2 us, 0) holds samples 98 and 99; [0, 3 us) holds 100, 101, 102
    assert extract_windows(w, WindowSpec(-2e-6, 0.0, 0.0, 3e-6)) == (98.5, 101.0)


def test_window_outside_record_rejected():
    with pytest.raises(AcquisitionError):
        extract_windows(wave(np.ones(10)), WindowSpec(-1e-3, 0.0, 0.0, 5e-6))


def test_window_spec_invariants():
    with pytest.raises(ValueError):
        WindowSpec(0.0, 0.0, 1e-6, 2e-6)
    with pytest.raises(ValueError):
        WindowSpec(0.0, 2e-6, 1e-6, 3e-6)


def test_default_windows_max_polarized():
    seq = build_rabi(300e-9)
    w = default_windows(seq, TimingConfig())
    assert (w.ref_start, w.ref_end) == (-200e-6, 0.0)
    assert w.sig_start == pytest.approx(1e-6 + 300e-9 + 1e-6)
    assert w.sig_end - w.sig_start == pytest.approx(200e-6)


def test_default_windows_partial_depolarized_same_phase():
    seq = build_rabi(300e-9, TimingConfig(), PD)
    w = default_windows(seq, TimingConfig())
    assert w.ref_start - w.sig_start == pytest.approx(seq.cycle_period)
    assert w.ref_end - w.ref_start == pytest.approx(w.sig_end - w.sig_start)


def test_record_covers_windows():
    seq = build_rabi(300e-9, TimingConfig(), PD)
    scope = record_geometry([seq], TimingConfig(), 5e6, 1)
    w = default_windows(seq, TimingConfig())
    t0 = -scope.pretrigger_samples / scope.sample_rate
    assert t0 <= w.sig_start and t0 + scope.record_length / scope.sample_rate >= w.ref_end


# ----------------------------------------------------------------------------
# sweeps

@pytest.fixture(scope="module")
def rabi_noisy():
    return run_sweep(RABI, np.linspace(0, 1e-6, 6), MP, NOISY, seed=7)


def test_eq1_consistency(rabi_noisy):
    r = rabi_noisy
    expected = (r.i_sig / r.i_ref - 1) * 100
    assert np.allclose(r.contrast_percent, expected, rtol=1e-12, atol=0)
    assert len(r.contrast_percent) == len(r.swept_values) == 6


def test_no_microwave_gives_zero_contrast(rabi_noisy):
    # noise floor of one window difference: 2 mV over N = 8 records and 1000 samples, relative to ~1 V
    assert abs(rabi_noisy.contrast_percent[0]) < 0.02


def test_rabi_sweep_oscillates():
    r = run_sweep(RABI, np.linspace(0, 400e-9, 5), MP, QUIET, seed=1)
    c = r.contrast_percent
    assert c[0] == pytest.approx(0.0, abs=1e-3)  # only T1 relaxation over the ~2 us dark gap
    assert np.argmin(c) == 2  # pi pulse at 200 ns
    assert c[2] < -0.3 and c[4] > c[2]


def test_sweep_is_deterministic(rabi_noisy):
    again = run_sweep(RABI, np.linspace(0, 1e-6, 6), MP, NOISY, seed=7)
    assert np.array_equal(again.contrast_percent, rabi_noisy.contrast_percent)


def test_parallel_equals_serial_execution():
    values = np.linspace(0, 1e-6, 4)
    a = run_sweep(RABI, values, PD, DRIFTING, seed=3, workers=1)
    b = run_sweep(RABI, values, PD, DRIFTING, seed=3, workers=2)
    assert np.array_equal(a.i_sig, b.i_sig) and np.array_equal(a.i_ref, b.i_ref)


def test_shuffle_keeps_point_results_in_input_order():
    values = np.linspace(0, 1e-6, 4)
    a = run_sweep(RABI, values, MP, NOISY, seed=3)
    b = run_sweep(RABI, values, MP, NOISY, seed=3, shuffle=True)
    # without drift points are independent of their acquisition order
    assert np.array_equal(a.contrast_percent, b.contrast_percent)
    assert np.array_equal(b.swept_values, values)


FLOOR = 2e-3 / math.sqrt(50) * 100  # contrast noise floor at the default noise and N, percent


@pytest.mark.parametrize("builder, values", [(RABI, np.linspace(0, 2e-6, 6)), (T1, np.array([0.0, 2e-6, 6e-6]))])
def test_strategy_equivalence_for_short_sequences(builder, values):
    # sequences shorter than 1e-3 T1 leave the no-microwave half as polarized as the init tail
    a = run_sweep(builder, values, MP, QUIET, seed=2)
    b = run_sweep(builder, values, PD, QUIET, seed=2)
    assert np.all(np.abs(a.contrast_percent - b.contrast_percent) < FLOOR)


def test_partial_depolarized_reference_sees_long_dark_gap():
    # a dark gap comparable to T1 relaxes both halves alike, so the T1 signal cancels
    a = run_sweep(T1, [8e-3], MP, QUIET, seed=2)
    b = run_sweep(T1, [8e-3], PD, QUIET, seed=2)
    assert a.contrast_percent[0] < -0.5 and abs(b.contrast_percent[0]) < FLOOR


def test_serial_agrees_with_partial_depolarized_without_drift():
    values = np.linspace(0, 1e-6, 4)
    a = serial_reference_sweep(RABI, values, QUIET, seed=4)
    b = run_sweep(RABI, values, PD, QUIET, seed=4)
    assert np.allclose(a.contrast_percent, b.contrast_percent, atol=0.02)
    assert a.strategy == "serial"


def test_serial_single_point_frozen_drift_exact():
    s = replace(QUIET, drift=DriftState(offset=0.02, clamp=0.05))
    a = serial_reference_sweep(RABI, [200e-9], s, seed=4)
    b = run_sweep(RABI, [200e-9], PD, s, seed=4)
    assert a.contrast_percent[0] == pytest.approx(b.contrast_percent[0], abs=1e-3)


def test_errors_annotated_with_swept_value():
    with pytest.raises(SequenceError, match="swept value"):
        run_sweep(RABI, [100e-9, -1e-9], MP, QUIET, seed=0)
    with pytest.raises(AcquisitionError):
        run_sweep(RABI, [], MP, QUIET, seed=0)


def test_sweep_csv_round_trip(tmp_path, rabi_noisy):
    rabi_noisy.metadata["note"] = "x"
    rabi_noisy.to_csv(tmp_path / "s.csv")
    text = (tmp_path / "s.csv").read_text()
    assert "swept_value_s,i_ref_v,i_sig_v,contrast_pct" in text
    for key in ("protocol", "strategy", "n_averages", "seed", "config hash".replace(" ", "_")):
        assert f"# {key}: " in text
    back = SweepResult.from_csv(tmp_path / "s.csv")
    for name in ("swept_values", "i_sig", "i_ref", "contrast_percent"):
        assert np.array_equal(getattr(back, name), getattr(rabi_noisy, name))
    assert back.metadata == {"note": "x"} and back.seed == 7


def test_sweep_result_rejects_ragged_rows():
    with pytest.raises(ValueError):
        SweepResult("rabi", [0, 1], [1.0], [1.0], [0.0], 1, "max_polarized", 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.5, 2.0), min_size=1, max_size=10), st.floats(0.5, 2.0))
def test_eq1_property(sig, ref):
    r = SweepResult("rabi", np.arange(len(sig)), sig, [ref] * len(sig), [contrast(s, ref) for s in sig], 1,
                    "max_polarized", 0)
    assert np.allclose(r.contrast_percent, (r.i_sig / r.i_ref - 1) * 100, rtol=1e-12, atol=1e-15)


def test_protocol_registry():
    assert list(PROTOCOLS) == ["rabi", "ramsey", "t1", "echo-rephase", "echo-t2", "echo-revivals", "repolarization"]
    assert PROTOCOLS["echo-revivals"].default_strategy is PD
    with pytest.raises(KeyError):
        protocol_builder("nope")


# ----------------------------------------------------------------------------
# repolarization

def test_repolarization_noise_free():
    _, report = measure_repolarization(QUIET, seed=1)
    assert report.params["tau_repol"] == pytest.approx(nv.EnsembleConfig().tau_repol, rel=1e-3)


def test_repolarization_without_dark_gap_is_rejected():
    with pytest.raises(FitError, match="no decay"):
        measure_repolarization(QUIET, seed=1, t_dark=0.0)


# ----------------------------------------------------------------------------
# drift comparison

@pytest.fixture(scope="module")
def comparison():
    return drift_comparison(replace(DRIFTING, n_averages=4), np.linspace(0, 1e-6, 6), seed=5)


def test_drift_comparison_serial_is_worse(comparison):
    assert set(comparison.sweeps) == {"max_polarized", "partial_depolarized", "serial"}
    assert comparison.ratios["serial"] > 3
    assert comparison.ratios["max_polarized"] == 1.0
    assert "signal_reference_correlation" in comparison.summary()


def test_drift_comparison_round_trip(tmp_path, comparison):
    comparison.to_csv(tmp_path / "d.csv")
    back = DriftComparison.from_csv(tmp_path / "d.csv")
    assert back.noise_std == comparison.noise_std
    assert back.correlation == comparison.correlation
    assert back.drift_std == comparison.drift_std
