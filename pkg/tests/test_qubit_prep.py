import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mdiqkd.qubit_prep import (
    AWG,
    IDEAL,
    SG,
    Basis,
    IntensitySetting,
    StateParams,
    intensity_ladder,
    phase_samples,
    prepare_pulse_pair,
    randomize_phase,
    sample_photon_number,
)

# P(n=1 | mean 0.5) = 0.5 exp(-0.5), evaluated at 40 digits.
P1_HALF = 0.303265329856316711801899767495590226721
# (0.986 + 5.34e-5) / (1 + 2 * 5.34e-5), evaluated at 40 digits.
AWG_DOMINANT_WEIGHT = 0.9859481007428406646170189023812256850968


def test_ideal_z_state_occupies_early_bin_only():
    p = prepare_pulse_pair("Z", 0, IntensitySetting.signal(1.0), IDEAL)
    assert p.amp_early == pytest.approx(1.0)
    assert p.amp_late == 0


def test_ideal_x_plus_is_equal_superposition():
    p = prepare_pulse_pair("X", 0, IntensitySetting.signal(1.0), IDEAL)
    assert p.amp_early == pytest.approx(math.sqrt(0.5))
    assert p.amp_late == pytest.approx(math.sqrt(0.5))


def test_awg_dominant_bin_weight():
    p = prepare_pulse_pair("Z", 0, IntensitySetting.signal(1.0), AWG)
    assert abs(p.amp_early) ** 2 == pytest.approx(AWG_DOMINANT_WEIGHT, rel=1e-12)
    assert abs(p.amp_early) ** 2 == pytest.approx(0.98595, abs=1e-5)


def test_ideal_x_states_orthogonal_and_z_states_single_bin():
    plus = IDEAL.state_vector("X", 0)
    minus = IDEAL.state_vector("X", 1)
    assert abs(np.vdot(plus, minus)) < 1e-15
    assert abs(IDEAL.state_vector("Z", 0)[1]) == 0
    assert abs(IDEAL.state_vector("Z", 1)[0]) == 0


def test_global_phase_starts_at_zero_and_tag_unset():
    p = prepare_pulse_pair("X", 1, IntensitySetting.decoy(0.1), AWG)
    assert p.global_phase == 0.0
    assert p.photon_count_tag is None


@pytest.mark.parametrize("basis,bit", [("Y", 0), ("Z", 2), ("X", -1)])
def test_invalid_basis_or_bit_rejected(basis, bit):
    with pytest.raises(ValueError):
        prepare_pulse_pair(basis, bit, IntensitySetting.signal(0.5), AWG)


def test_negative_mean_photon_number_rejected():
    with pytest.raises(ValueError):
        IntensitySetting.signal(-0.1)


def test_vacuum_must_be_empty_and_ladder_ordered():
    with pytest.raises(ValueError):
        IntensitySetting("vacuum", 0.1)
    with pytest.raises(ValueError):
        intensity_ladder(0.1, 0.2)
    sig, dec, vac = intensity_ladder(0.5, 0.1)
    assert sig.mean_photon_number > dec.mean_photon_number > vac.mean_photon_number == 0


def test_state_params_validation():
    with pytest.raises(ValueError):
        StateParams(m_z0=1.2)
    with pytest.raises(ValueError):
        StateParams(b=-1e-6)
    with pytest.raises(ValueError):
        StateParams(mode_width_fwhm=3e-9, mode_separation=2.5e-9)


def test_phase_randomisation_reproducible():
    pair = prepare_pulse_pair("Z", 0, IntensitySetting.signal(0.5), AWG)
    a = [randomize_phase(pair, np.random.default_rng(7)).global_phase for _ in range(3)]
    b = [randomize_phase(pair, np.random.default_rng(7)).global_phase for _ in range(3)]
    assert a == b


def test_phase_randomisation_uniform_chi_square():
    x = phase_samples(np.random.default_rng(1), 1_000_000)
    counts, _ = np.histogram(x, bins=64, range=(0, 2 * math.pi))
    assert stats.chisquare(counts).pvalue > 0.01
    assert x.min() >= 0 and x.max() < 2 * math.pi


def test_phase_randomisation_disabled_and_discrete():
    pair = prepare_pulse_pair("Z", 0, IntensitySetting.signal(0.5), AWG)
    rng = np.random.default_rng(2)
    assert all(randomize_phase(pair, rng, enabled=False).global_phase == 0 for _ in range(10))
    vals = {round(randomize_phase(pair, rng, levels=4).global_phase, 12) for _ in range(200)}
    assert vals == {round(k * math.pi / 2, 12) for k in range(4)}


def test_vacuum_tag_always_zero():
    pair = prepare_pulse_pair("Z", 0, IntensitySetting.vacuum(), AWG)
    rng = np.random.default_rng(3)
    assert all(sample_photon_number(pair, rng).photon_count_tag == 0 for _ in range(100))


def test_poisson_tag_statistics():
    rng = np.random.default_rng(4)
    tags = rng.poisson(0.5, 1_000_000)
    assert tags.mean() == pytest.approx(0.5, abs=0.002)
    assert stats.poisson.pmf(1, 0.5) == pytest.approx(P1_HALF, rel=1e-14)
    assert np.mean(tags == 1) == pytest.approx(P1_HALF, abs=0.002)


def test_sampling_does_not_change_amplitudes():
    pair = prepare_pulse_pair("X", 1, IntensitySetting.signal(0.7), SG)
    tagged = sample_photon_number(pair, np.random.default_rng(5))
    assert tagged.amplitudes.tolist() == pair.amplitudes.tolist()


@settings(max_examples=200, deadline=None)
@given(
    m=st.floats(0, 1), b=st.floats(0, 1e-2), phi=st.floats(0, 2 * math.pi),
    mu=st.floats(0, 5), basis=st.sampled_from(["Z", "X"]), bit=st.integers(0, 1),
)
def test_amplitudes_normalised_to_mean_photon_number(m, b, phi, mu, basis, bit):
    params = StateParams(m_z0=m, m_z1=m, m_xplus=m, m_xminus=m, b=b, phi_xplus=phi, phi_xminus=phi, phi_z=phi)
    p = prepare_pulse_pair(basis, bit, IntensitySetting.signal(mu), params)
    assert p.mean_photon_number == pytest.approx(mu, rel=1e-12, abs=1e-300)


def test_awg_and_sg_bin_weights_within_one_percent():
    for basis in Basis:
        for bit in (0, 1):
            a = np.abs(AWG.state_vector(basis, bit)) ** 2
            s = np.abs(SG.state_vector(basis, bit)) ** 2
            assert np.all(np.abs(a - s) <= 0.01)
