import math

import numpy as np
import pytest

from mdiqkd.bsm import ID201, SNSPD
from mdiqkd.channel import FIG3, STATIC, DriftState
from mdiqkd.feedback import (
    TEMPORAL_PRECISION,
    FeedbackConfig,
    arrival_estimate_stderr,
    frequency_feedback,
    measure_arrival_difference,
    polarization_duty,
    polarization_feedback,
    simulate_timeline,
    static_state,
    temporal_feedback,
)


def test_zero_drift_estimate_is_unbiased():
    rng = np.random.default_rng(0)
    est = [measure_arrival_difference(DriftState(), ID201, 1000, rng) for _ in range(400)]
    assert abs(np.mean(est)) < 4 * arrival_estimate_stderr(1000, ID201) / math.sqrt(400)


def test_large_offset_estimated_within_precision():
    rng = np.random.default_rng(1)
    for _ in range(50):
        est = measure_arrival_difference(DriftState(delta_arrival=-1.6e-9), ID201, 1000, rng)
        assert abs(est + 1.6e-9) < TEMPORAL_PRECISION


def test_estimator_stderr_halves_when_samples_quadruple():
    rng = np.random.default_rng(2)
    s1 = np.std([measure_arrival_difference(DriftState(), SNSPD, 250, rng) for _ in range(3000)])
    s4 = np.std([measure_arrival_difference(DriftState(), SNSPD, 1000, rng) for _ in range(3000)])
    assert s1 / s4 == pytest.approx(2.0, rel=0.08)
    assert arrival_estimate_stderr(250, SNSPD) / arrival_estimate_stderr(1000, SNSPD) == pytest.approx(2.0)


def test_measure_rejects_empty_sample():
    with pytest.raises(ValueError):
        measure_arrival_difference(DriftState(), ID201, 0, np.random.default_rng(0))


def test_temporal_correction():
    state = DriftState(delta_arrival=-1.6e-9)
    est = measure_arrival_difference(state, ID201, 1000, np.random.default_rng(3))
    fixed = temporal_feedback(est, state)
    assert abs(fixed.delta_arrival) < TEMPORAL_PRECISION


def test_temporal_deadband():
    state = DriftState(delta_arrival=10e-12)
    assert temporal_feedback(10e-12, state, deadband=30e-12) == state


def test_temporal_feedback_idempotent_when_aligned():
    state = DriftState(delta_arrival=0.0)
    once = temporal_feedback(0.0, state)
    assert temporal_feedback(0.0, once) == once == state


def test_polarisation_restoration_and_duty():
    assert polarization_feedback(DriftState(pol_overlap=0.3)).pol_overlap == 0.99
    assert polarization_feedback(DriftState(pol_overlap=0.3), 1.0).pol_overlap == 1.0
    assert polarization_duty() == pytest.approx(0.975)
    assert FeedbackConfig().duty == pytest.approx(0.975)
    assert FeedbackConfig.disabled().duty == 1.0
    with pytest.raises(ValueError):
        polarization_feedback(DriftState(), 1.5)


def test_frequency_correction_threshold():
    rng = np.random.default_rng(4)
    fixed = frequency_feedback(DriftState(freq_diff=25e6), measurement_error=1e6, rng=rng)
    assert abs(fixed.freq_diff) < 10e6
    assert frequency_feedback(DriftState(freq_diff=5e6)).freq_diff == 5e6
    assert frequency_feedback(DriftState(freq_diff=5e6), lasers=1).freq_diff == 0.0


def test_one_laser_pins_frequency_while_two_lasers_drift():
    rng = np.random.default_rng(5)
    one = simulate_timeline(FIG3, FeedbackConfig(lasers=1), 600, 1.0, rng, ID201)
    assert np.all(one.freq_diff == 0.0)
    free = simulate_timeline(FIG3, FeedbackConfig.disabled(2), 600, 1.0, rng, ID201)
    assert np.abs(free.freq_diff).max() > 1e6
    on = simulate_timeline(FIG3, FeedbackConfig(lasers=2), 3600, 1.0, rng, ID201)
    assert np.abs(on.freq_diff).max() <= 10e6 + 5 * 2e6


def test_loops_hold_overlap_under_drift():
    rng = np.random.default_rng(6)
    width = 250e-12
    on = simulate_timeline(FIG3, FeedbackConfig(lasers=2), 3600, 1.0, rng, ID201, width)
    off = simulate_timeline(FIG3, FeedbackConfig.disabled(2), 3600, 1.0, rng, ID201, width)
    assert on.overlap(width).mean() > 0.95
    assert off.overlap(width)[-600:].mean() < 0.2
    assert np.abs(on.delta_arrival).max() < 100e-12


def test_static_channel_settles_at_residual_overlap():
    st = static_state(FeedbackConfig())
    assert (st.delta_arrival, st.pol_overlap, st.freq_diff) == (0.0, 0.99, 0.0)
    tl = simulate_timeline(STATIC, FeedbackConfig(), 60, 1.0, np.random.default_rng(7), ID201)
    assert np.allclose(tl.pol_overlap, 0.99)


def test_timeline_validation_and_rows():
    with pytest.raises(ValueError):
        simulate_timeline(STATIC, FeedbackConfig(), 0, 1.0, np.random.default_rng(0), ID201)
    tl = simulate_timeline(FIG3, FeedbackConfig(), 5, 1.0, np.random.default_rng(0), ID201)
    rows = list(tl.rows(250e-12))
    assert len(rows) == 5 and rows[-1]["time_s"] == pytest.approx(5.0)
