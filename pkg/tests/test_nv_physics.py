import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from odmr_rig import nv_physics as nv

CFG = nv.EnsembleConfig()
UNDAMPED = replace(CFG, damping=False)


def single(delta: float, bloch=(0.0, 0.0, 1.0)) -> nv.EnsembleState:
    return nv.EnsembleState(np.array([bloch], dtype=float), np.array([delta]), np.array([1.0]))


def bloch_ode(v0, duration, f_rabi, delta, phase):
    """Rotating-frame Bloch equations without relaxation, integrated numerically."""
    w = 2 * math.pi * np.array([-math.sin(phase) * f_rabi, math.cos(phase) * f_rabi, delta])
    sol = solve_ivp(lambda t, v: np.cross(w, v), (0.0, duration), v0, rtol=1e-11, atol=1e-13, method="DOP853")
    return sol.y[:, -1]


# ----------------------------------------------------------------------------
# configuration

def test_defaults_hold_measured_constants():
    assert CFG.b0_field == 43.62
    assert CFG.center_frequency == 2.74864e9
    assert CFG.t1 == 6.274e-3
    assert CFG.t2_alpha == 3.438e-6
    assert CFG.t2_beta == 68.12e-6
    assert CFG.tau_repol == 138.07e-6


@pytest.mark.parametrize("field,value", [("t1", -1.0), ("tau_repol", 0.0), ("t2_alpha", float("nan"))])
def test_config_errors_name_the_field(field, value):
    with pytest.raises(nv.ConfigError, match=field):
        nv.EnsembleConfig(**{field: value})


def test_weights_must_sum_to_one():
    with pytest.raises(nv.ConfigError, match="sum to 1"):
        nv.EnsembleConfig(hyperfine_lines=((0.0, 0.6), (1e6, 0.6)))


def test_rabi_t2_calibration_and_trend():
    assert CFG.rabi_t2(2.5e6) == pytest.approx(1.175e-6, rel=1e-12)
    fs = [0.5e6, 1e6, 2.5e6, 5e6]
    t2 = [CFG.rabi_t2(f) for f in fs]
    assert all(a > b for a, b in zip(t2, t2[1:]))


def test_revival_period_from_field():
    assert CFG.revival_period == pytest.approx(1 / (1070.5 * 43.62), rel=1e-12)
    assert 21.3e-6 < CFG.revival_period < 21.5e-6


# ----------------------------------------------------------------------------
# ensemble construction

def test_stratified_allocation_per_line():
    cfg = replace(CFG, spread_shape="gaussian", n_subensembles=99, detuning_spread_sigma=1e5)
    det, w = nv.sample_detunings(cfg)
    assert len(det) == 99
    for offset, weight in cfg.hyperfine_lines:
        near = np.abs(det - offset) < 0.95e6
        assert near.sum() == 33
        assert w[near].sum() == pytest.approx(weight)


def test_zero_spread_single_line():
    cfg = replace(CFG, hyperfine_lines=((3e5, 1.0),), detuning_spread_sigma=0.0)
    state = nv.init_ensemble(cfg)
    assert np.all(state.detuning == 3e5)


def test_init_is_fully_polarized_and_brightest():
    state = nv.init_ensemble(CFG)
    assert np.all(state.bloch == [0, 0, 1]) and state.nonresonant_p0 == 1.0
    assert state.weight.sum() == pytest.approx(1.0)
    assert nv.pl_level(state, CFG) == CFG.pl_base


def test_detunings_are_deterministic():
    a, b = nv.sample_detunings(CFG), nv.sample_detunings(CFG)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_power_to_rabi_frequency():
    assert nv.rabi_frequency_from_power(14.74, CFG) == pytest.approx(2.5e6, rel=1e-12)
    assert nv.rabi_frequency_from_power(0.0, CFG) == 0.0
    assert nv.rabi_frequency_from_power(4 * 14.74, CFG) == pytest.approx(5.0e6, rel=1e-12)
    assert CFG.rabi_coefficient == pytest.approx(651.2e3, rel=1e-4)
    with pytest.raises(ValueError):
        nv.rabi_frequency_from_power(-1.0, CFG)


# ----------------------------------------------------------------------------
# microwave rotations

def test_pi_and_half_pi_on_resonance():
    f = 2.5e6
    pi = nv.apply_mw_pulse(single(0.0), 1 / (2 * f), f, 0.0, UNDAMPED)
    assert pi.bloch[0, 2] == pytest.approx(-1.0, abs=1e-12)
    half = nv.apply_mw_pulse(single(0.0), 1 / (4 * f), f, 0.0, UNDAMPED)
    assert half.bloch[0, 2] == pytest.approx(0.0, abs=1e-12)
    assert math.hypot(*half.bloch[0, :2]) == pytest.approx(1.0, abs=1e-12)


def test_pi_pulse_damped_by_drive_envelope():
    f = 2.5e6
    pi = nv.apply_mw_pulse(single(0.0), 1 / (2 * f), f, 0.0, CFG)
    assert pi.bloch[0, 2] == pytest.approx(-math.exp(-1 / (2 * f) / CFG.rabi_t2(f)), abs=1e-12)


def test_detuned_generalized_pi_pulse_reaches_equator():
    # axis at 45 degrees: a rotation by pi about it takes z=+1 exactly to z=0
    f = 2.5e6
    duration = 1 / (2 * math.hypot(f, f))
    out = nv.apply_mw_pulse(single(f), duration, f, 0.0, UNDAMPED)
    assert out.bloch[0, 2] == pytest.approx(0.0, abs=1e-12)
    ref = bloch_ode([0, 0, 1], duration, f, f, 0.0)
    assert np.allclose(out.bloch[0], ref, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5e6, 5e6), st.floats(0.1e6, 5e6), st.floats(-math.pi, math.pi), st.floats(0, 1e-6))
def test_rotation_matches_ode_oracle(delta, f_rabi, phase, duration):
    v0 = np.array([0.3, -0.4, math.sqrt(1 - 0.25)])
    out = nv.apply_mw_pulse(single(delta, v0), duration, f_rabi, phase, UNDAMPED)
    assert np.allclose(out.bloch[0], bloch_ode(v0, duration, f_rabi, delta, phase), atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-5e6, 5e6), st.floats(0, 10e6),
       st.floats(-math.pi, math.pi), st.floats(0, 5e-6))
def test_undamped_pulse_preserves_length(x, y, z, delta, f_rabi, phase, duration):
    v = np.array([x, y, z])
    out = nv.apply_mw_pulse(single(delta, v), duration, f_rabi, phase, UNDAMPED)
    assert np.linalg.norm(out.bloch[0]) == pytest.approx(np.linalg.norm(v), abs=1e-9)


def test_pulse_leaves_nonresonant_population():
    state = replace(nv.init_ensemble(CFG), nonresonant_p0=0.7)
    assert nv.apply_mw_pulse(state, 100e-9, 2.5e6, 0.0, CFG).nonresonant_p0 == 0.7


@pytest.mark.parametrize("delta", np.linspace(-5e6, 5e6, 21))
def test_echo_identity_hard_pulses(delta):
    # instantaneous pulses: pi/2 - tau - pi - tau - pi/2 (closing phase pi) refocuses to z = -1
    f = 1e13
    tau = 1.7e-6
    s = single(delta)
    s = nv.apply_mw_pulse(s, 1 / (4 * f), f, 0.0, UNDAMPED)
    s = nv.free_evolve(s, tau, True, UNDAMPED)
    s = nv.apply_mw_pulse(s, 1 / (2 * f), f, 0.0, UNDAMPED)
    s = nv.free_evolve(s, tau, True, UNDAMPED)
    s = nv.apply_mw_pulse(s, 1 / (4 * f), f, math.pi, UNDAMPED)
    assert s.bloch[0, 2] == pytest.approx(-1.0, abs=1e-9)


def test_echo_identity_against_ode():
    f, delta, tau = 1e13, 2.3e6, 0.8e-6
    v = np.array([0.0, 0.0, 1.0])
    for duration, ph, gap in ((1 / (4 * f), 0.0, tau), (1 / (2 * f), 0.0, tau), (1 / (4 * f), math.pi, 0.0)):
        v = bloch_ode(v, duration, f, delta, ph)
        if gap:
            v = bloch_ode(v, gap, 0.0, delta, 0.0)
    assert v[2] == pytest.approx(-1.0, abs=1e-6)


# ----------------------------------------------------------------------------
# free evolution

def test_zero_duration_is_identity():
    state = nv.apply_mw_pulse(nv.init_ensemble(CFG), 100e-9, 2.5e6, 0.0, CFG)
    assert nv.free_evolve(state, 0.0, False, CFG) is state


def test_t1_relaxation_by_one_over_e():
    cfg = replace(CFG, z_thermal=0.2)
    state = single(1e5, (0.0, 0.0, -0.6))
    out = nv.free_evolve(state, cfg.t1, False, cfg)
    assert out.bloch[0, 2] - 0.2 == pytest.approx((-0.6 - 0.2) / math.e, rel=1e-12)
    p_th = 0.6
    assert out.nonresonant_p0 - p_th == pytest.approx((1.0 - p_th) / math.e, rel=1e-12)


def test_echo_context_accumulates_time_without_decay():
    state = single(0.0, (1.0, 0.0, 0.0))
    out = nv.free_evolve(state, 2e-6, True, CFG)
    assert out.elapsed_free_precession == 2e-6
    assert out.bloch[0, 0] == pytest.approx(1.0)
    plain = nv.free_evolve(state, 2e-6, False, CFG)
    assert plain.bloch[0, 0] == pytest.approx(math.exp(-2e-6 / CFG.t2_alpha))


def gaussian_cfg(sigma: float) -> nv.EnsembleConfig:
    return replace(UNDAMPED, hyperfine_lines=((0.0, 1.0),), detuning_spread_sigma=sigma, spread_shape="gaussian",
                   n_subensembles=2000)


@pytest.mark.parametrize("t", [50e-9, 150e-9, 232e-9, 400e-9])
def test_gaussian_dephasing_time(t):
    # T2* = 1 / (sqrt(2) pi sigma); sigma chosen for 232.03 ns
    t2s = 232.03e-9
    sigma = 1 / (math.sqrt(2) * math.pi * t2s)
    cfg = gaussian_cfg(sigma)
    state = nv.init_ensemble(cfg)
    state = replace(state, bloch=np.tile([1.0, 0.0, 0.0], (len(state.weight), 1)))
    got = nv.free_evolve(state, t, False, cfg).transverse_magnitude()
    assert got == pytest.approx(math.exp(-(t / t2s) ** 2), abs=1e-3)
    # brute force over 1e5 random detunings
    rng = np.random.default_rng(5)
    brute = abs(np.mean(np.exp(2j * math.pi * rng.normal(0.0, sigma, 100_000) * t)))
    assert got == pytest.approx(brute, abs=0.01)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 1), st.lists(st.floats(0, 50e-3), min_size=2, max_size=6))
def test_thermalization_is_monotone(z0, p_nr, times):
    state = replace(single(0.0, (0.0, 0.0, z0)), nonresonant_p0=p_nr)
    gaps = [abs(nv.free_evolve(state, t, False, CFG).bloch[0, 2] - CFG.z_thermal) for t in sorted(times)]
    assert all(a >= b - 1e-15 for a, b in zip(gaps, gaps[1:]))
    far = nv.free_evolve(state, 50 * CFG.t1, False, CFG)
    assert far.p0[0] == pytest.approx(0.5 * (1 + CFG.z_thermal), abs=1e-12)


# ----------------------------------------------------------------------------
# echo envelope

def test_envelope_normalized_at_zero():
    assert nv.echo_envelope(0.0, CFG) == 1.0


def test_envelope_revival_peaks_and_valleys():
    t_rev = CFG.revival_period
    cfg = replace(CFG, t_dec=t_rev / 6)
    e = lambda tau: nv.echo_envelope(tau, cfg)  # noqa: E731
    assert e(t_rev) > e(0.97 * t_rev) and e(t_rev) > e(1.03 * t_rev)
    assert e(t_rev / 2) < 1e-3


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 300e-6))
def test_envelope_bounded(tau):
    assert 0.0 <= nv.echo_envelope(tau, CFG) <= 1.0


def test_refocus_applies_envelope_of_arm_time():
    state = replace(single(0.0, (0.5, 0.5, 0.1)), elapsed_free_precession=2 * 7e-6)
    out = nv.echo_refocus(state, CFG)
    k = nv.echo_envelope(7e-6, CFG)
    assert np.allclose(out.bloch[0], [0.5 * k, 0.5 * k, 0.1])
    assert out.elapsed_free_precession == 0.0


# ----------------------------------------------------------------------------
# laser and photoluminescence

def test_ten_time_constants_repolarize():
    state = nv.apply_mw_pulse(nv.init_ensemble(CFG), 200e-9, 2.5e6, 0.0, CFG)
    state = replace(state, nonresonant_p0=0.5)
    out, _ = nv.laser_evolve(state, 10 * CFG.tau_repol, 1e-6, CFG)
    assert np.all(np.abs(1 - out.p0) < 5e-5) and abs(1 - out.nonresonant_p0) < 5e-5


def test_polarized_trace_is_flat():
    _, trace = nv.laser_evolve(nv.init_ensemble(CFG), 100e-6, 1e-6, CFG)
    assert np.all(trace.samples == CFG.pl_base)


def test_trace_recovers_with_repolarization_constant():
    f = 2.5e6
    state = nv.apply_mw_pulse(nv.init_ensemble(UNDAMPED), 1 / (2 * f), f, 0.0, UNDAMPED)
    _, trace = nv.laser_evolve(state, 1e-3, 1e-6, CFG)
    deficit = CFG.pl_base - trace.samples
    slope = np.polyfit(trace.times[:500], np.log(deficit[:500]), 1)[0]
    assert -1 / slope == pytest.approx(138.07e-6, rel=1e-9)


def test_trace_near_asymptote_after_ten_constants():
    state = replace(nv.init_ensemble(CFG), nonresonant_p0=0.5)
    _, trace = nv.laser_evolve(state, 1.5e-3, 1e-6, CFG)
    i = int(round(1.38e-3 / 1e-6))
    assert abs(trace.samples[i] - CFG.pl_base) / CFG.pl_base < 1e-4


def test_inverted_resonant_slice_deficit():
    state = single(0.0, (0.0, 0.0, -1.0))
    assert CFG.pl_base - nv.pl_level(state, CFG) == pytest.approx(CFG.contrast_scale * CFG.resonant_fraction)


def test_thermal_pl_below_polarized():
    state = replace(single(0.0, (0.0, 0.0, CFG.z_thermal)), nonresonant_p0=0.5 * (1 + CFG.z_thermal))
    assert nv.pl_level(state, CFG) < nv.pl_level(nv.init_ensemble(CFG), CFG)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 1), st.floats(0, 1))
def test_pl_monotone_in_populations(z_a, z_b, p_a, p_b):
    lo_z, hi_z = sorted((z_a, z_b))
    lo_p, hi_p = sorted((p_a, p_b))
    lo = replace(single(0.0, (0.0, 0.0, lo_z)), nonresonant_p0=lo_p)
    hi = replace(single(0.0, (0.0, 0.0, hi_z)), nonresonant_p0=hi_p)
    assert nv.pl_level(lo, CFG) <= nv.pl_level(hi, CFG)


def test_pl_trace_csv_round_trip(tmp_path):
    trace = nv.PLTrace(0.0, 1e-6, np.linspace(0.9, 1.0, 11))
    trace.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "t_s,pl"
    back = nv.PLTrace.from_csv(tmp_path / "t.csv")
    assert np.array_equal(back.samples, trace.samples) and back.dt == pytest.approx(trace.dt)


def test_pl_trace_rejects_negative_samples():
    with pytest.raises(ValueError):
        nv.PLTrace(0.0, 1e-6, np.array([1.0, -0.1]))
