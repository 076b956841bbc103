import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdiqkd.channel import (
    ALICE,
    BOB,
    FIG3,
    STATIC,
    ChannelConfig,
    DriftModel,
    DriftState,
    apply_channel,
    drift_model,
    drift_trace,
    fold,
    pair_mismatch,
    split_link,
    step_drift,
    transmittance,
)
from mdiqkd.qubit_prep import AWG, IntensitySetting, prepare_pulse_pair


def test_transmittance_examples():
    assert transmittance(ChannelConfig(length_km=100, loss_per_km=0.2)) == pytest.approx(0.01, rel=1e-12)
    assert transmittance(ChannelConfig()) == 1.0
    assert transmittance(ChannelConfig(extra_loss_db=60)) == pytest.approx(1e-6, rel=1e-12)


def test_negative_loss_rejected():
    with pytest.raises(ValueError):
        ChannelConfig(extra_loss_db=-1)
    with pytest.raises(ValueError):
        split_link(-3.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 80), st.floats(0, 80))
def test_segments_compose_multiplicatively(x, y):
    both = transmittance(ChannelConfig(extra_loss_db=x + y))
    assert both == pytest.approx(transmittance(ChannelConfig(extra_loss_db=x))
                                 * transmittance(ChannelConfig(extra_loss_db=y)), rel=1e-12)
    if y - x > 1e-9:
        assert transmittance(ChannelConfig(extra_loss_db=x)) > transmittance(ChannelConfig(extra_loss_db=y))


def test_split_link_equal_arms():
    a, b = split_link(20.0)
    assert a.loss_db == b.loss_db == 10.0


def _pair(bit=0, mu=1.0):
    return prepare_pulse_pair("Z", bit, IntensitySetting.signal(mu), AWG)


def test_attenuation_of_mean_photon_number():
    out = apply_channel(_pair(), ChannelConfig(extra_loss_db=20), DriftState(), ALICE)
    assert out.mean_photon_number == pytest.approx(0.01, rel=1e-12)


def test_no_drift_gives_identical_polarisation():
    a = apply_channel(_pair(), ChannelConfig(), DriftState(pol_overlap=1.0), ALICE)
    b = apply_channel(_pair(), ChannelConfig(), DriftState(pol_overlap=1.0), BOB)
    assert np.allclose(a.pol_vector, b.pol_vector)
    assert pair_mismatch(a, b) == pytest.approx((0.0, 0.0, 1.0))


def test_arrival_offset_is_stamped_on_alice():
    drift = DriftState(delta_arrival=-1.6e-9, pol_overlap=0.4, freq_diff=3e6)
    a = apply_channel(_pair(), ChannelConfig(), drift, ALICE)
    b = apply_channel(_pair(), ChannelConfig(), drift, BOB)
    dt, dnu, pol = pair_mismatch(a, b)
    assert dt == pytest.approx(-1.6e-9)
    assert a.arrival_offset < b.arrival_offset
    assert dnu == pytest.approx(3e6)
    assert pol == pytest.approx(0.4, abs=1e-12)


def test_channel_preserves_labels_and_bin_ratio():
    p = prepare_pulse_pair("X", 1, IntensitySetting.signal(0.6), AWG)
    out = apply_channel(p, ChannelConfig(extra_loss_db=7.3), DriftState(), BOB)
    assert (out.basis, out.bit, out.intensity) == (p.basis, p.bit, p.intensity)
    assert abs(out.amp_early) ** 2 / abs(out.amp_late) ** 2 == pytest.approx(
        abs(p.amp_early) ** 2 / abs(p.amp_late) ** 2, rel=1e-12)


def test_static_channel_is_deterministic_and_symmetric():
    cfg = ChannelConfig(extra_loss_db=5)
    runs = [apply_channel(_pair(), cfg, DriftState(), side) for side in (ALICE, BOB, ALICE)]
    assert runs[0] == runs[2]
    assert runs[0].amplitudes.tolist() == runs[1].amplitudes.tolist()


def test_bad_side_rejected():
    with pytest.raises(ValueError):
        apply_channel(_pair(), ChannelConfig(), DriftState(), "eve")


def test_zero_slope_zero_noise_is_fixed_point():
    state = STATIC.initial_state()
    for _ in range(10):
        state = step_drift(state, 1.0, None, STATIC)
    assert (state.delta_arrival, state.pol_overlap, state.freq_diff) == (0.0, 1.0, 0.0)
    noisy = step_drift(STATIC.initial_state(), 1.0, np.random.default_rng(0), STATIC)
    assert (noisy.delta_arrival, noisy.pol_overlap, noisy.freq_diff) == (0.0, 1.0, 0.0)


def test_step_requires_positive_dt():
    with pytest.raises(ValueError):
        step_drift(DriftState(), 0.0, None)


def test_fig3_arrival_excursion_over_three_hours():
    rng = np.random.default_rng(11)
    tr = drift_trace(FIG3, 3 * 3600, 1.0, rng)
    # temperature ramps by about 10 degC over the window
    assert 8.0 <= tr["temperature"].max() - tr["temperature"].min() <= 12.0
    excursion = tr["delta_arrival"].max() - tr["delta_arrival"].min()
    assert 1e-9 <= excursion <= 3e-9


def test_sequential_and_vectorised_drift_agree_in_distribution():
    n = 2000
    seq = []
    for seed in range(40):
        s = FIG3.initial_state()
        rng = np.random.default_rng(seed)
        for _ in range(n):
            s = step_drift(s, 1.0, rng, FIG3)
        seq.append(s.delta_arrival)
    vec = [drift_trace(FIG3, n, 1.0, np.random.default_rng(100 + seed))["delta_arrival"][-1]
           for seed in range(40)]
    assert np.mean(seq) == pytest.approx(np.mean(vec), abs=0.1e-9)


def test_pol_overlap_bounded_over_ten_million_steps():
    rng = np.random.default_rng(12)
    wild = DriftModel(temp_amplitude=5.0, temp_period=600.0, pol_coeff=400.0, freq_sigma=1e8, freq_bound=1e8)
    tr = drift_trace(wild, 10_000_000, 0.1, rng)
    assert tr["pol_overlap"].min() >= 0.0 and tr["pol_overlap"].max() <= 1.0
    assert np.abs(tr["freq_diff"]).max() <= 1e8


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False), st.floats(0.1, 10))
def test_fold_stays_in_interval(x, hi):
    y = float(fold(x, 0.0, hi))
    assert 0.0 <= y <= hi + 1e-9


def test_drift_presets_and_custom():
    assert drift_model("off") is STATIC
    assert drift_model("fig3") is FIG3
    custom = drift_model({"preset": "fig3", "pol_coeff": 1.0})
    assert custom.pol_coeff == 1.0 and custom.arrival_coeff == FIG3.arrival_coeff
    with pytest.raises(ValueError):
        drift_model("storm")
    with pytest.raises(ValueError):
        drift_model({"bogus": 1})


def test_drift_state_validation():
    with pytest.raises(ValueError):
        DriftState(pol_overlap=1.5)
