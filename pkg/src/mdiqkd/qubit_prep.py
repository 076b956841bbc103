"""Weak-coherent time-bin qubit preparation for Alice and Bob.

States are imperfect pure time-bin qubits

    |psi> = ( sqrt(m + b) |e> + exp(i phi) sqrt(1 - m + b) |l> ) / sqrt(1 + 2b)

scaled by the square root of the mean photon number of the chosen intensity
class. Bit 0 maps to |e> (Z) and |+> (X), bit 1 to |l> and |->.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np


class Basis(str, enum.Enum):
    Z = "Z"
    X = "X"


class IntensityClass(str, enum.Enum):
    SIGNAL = "signal"
    DECOY = "decoy"
    VACUUM = "vacuum"


@dataclass(frozen=True)
class StateParams:
    """Measured state-preparation parameters of one qubit generator.

    ``m_z0`` is the early-bin weight of the Z state carrying bit 0 (|e>) and
    ``m_z1`` the early-bin weight of the bit-1 state (|l>), so the ideal
    values are 1 and 0. All times are in seconds.
    """

    m_z0: float = 1.0
    m_z1: float = 0.0
    m_xplus: float = 0.5
    m_xminus: float = 0.5
    b: float = 0.0
    phi_xplus: float = 0.0
    phi_xminus: float = math.pi
    phi_z: float = 0.0
    mode_width_fwhm: float = 250e-12
    mode_separation: float = 2.5e-9

    def __post_init__(self):
        for name in ("m_z0", "m_z1", "m_xplus", "m_xminus"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.b < 0:
            raise ValueError(f"b must be non-negative, got {self.b}")
        if self.mode_width_fwhm <= 0:
            raise ValueError("mode_width_fwhm must be positive")
        if self.mode_separation <= self.mode_width_fwhm:
            raise ValueError("mode_separation must exceed mode_width_fwhm")

    def weight_and_phase(self, basis: Basis | str, bit: int) -> tuple[float, float]:
        """Return ``(m, phi)`` for a BB84 state."""
        basis = Basis(basis)
        if bit not in (0, 1):
            raise ValueError(f"bit must be 0 or 1, got {bit!r}")
        if basis is Basis.Z:
            return (self.m_z0, self.phi_z) if bit == 0 else (self.m_z1, self.phi_z)
        return (self.m_xplus, self.phi_xplus) if bit == 0 else (self.m_xminus, self.phi_xminus)

    def state_vector(self, basis: Basis | str, bit: int) -> np.ndarray:
        """Normalised (early, late) amplitudes of a single-photon qubit."""
        m, phi = self.weight_and_phase(basis, bit)
        norm = 1.0 + 2.0 * self.b
        early = math.sqrt((m + self.b) / norm)
        late = math.sqrt((1.0 - m + self.b) / norm)
        return np.array([early, late * np.exp(1j * phi)], dtype=complex)

    @classmethod
    def from_mapping(cls, data: dict, base: "StateParams | None" = None) -> "StateParams":
        base = base or cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown state parameter(s): {sorted(unknown)}")
        return replace(base, **{k: float(v) for k, v in data.items()})


# Measured generator parameters; X-basis phase offsets are identical for both.
AWG = StateParams(
    m_z0=0.986,
    m_z1=0.0,
    m_xplus=0.4963,
    m_xminus=0.4963,
    b=5.34e-5,
    phi_xplus=0.0,
    phi_xminus=math.pi + 0.075,
    phi_z=0.0,
    mode_width_fwhm=250e-12,
    mode_separation=2.5e-9,
)

SG = StateParams(
    m_z0=0.982,
    m_z1=0.0,
    m_xplus=0.4963,
    m_xminus=0.4963,
    b=2.57e-5,
    phi_xplus=0.0,
    phi_xminus=math.pi + 0.075,
    phi_z=0.0,
    mode_width_fwhm=290e-12,
    mode_separation=2.5e-9,
)

IDEAL = StateParams()

STATE_PRESETS = {"awg": AWG, "sg": SG, "ideal": IDEAL}


@dataclass(frozen=True)
class IntensitySetting:
    cls: IntensityClass
    mean_photon_number: float

    def __post_init__(self):
        object.__setattr__(self, "cls", IntensityClass(self.cls))
        if self.mean_photon_number < 0:
            raise ValueError("mean photon number must be non-negative")
        if self.cls is IntensityClass.VACUUM and self.mean_photon_number != 0:
            raise ValueError("vacuum intensity must have zero mean photon number")

    @classmethod
    def signal(cls, mu: float) -> "IntensitySetting":
        return cls(IntensityClass.SIGNAL, mu)

    @classmethod
    def decoy(cls, nu: float) -> "IntensitySetting":
        return cls(IntensityClass.DECOY, nu)

    @classmethod
    def vacuum(cls) -> "IntensitySetting":
        return cls(IntensityClass.VACUUM, 0.0)


def intensity_ladder(signal: float, decoy: float) -> tuple[IntensitySetting, IntensitySetting, IntensitySetting]:
    """Signal, decoy and vacuum settings of one sender, validated for ordering."""
    if not signal > decoy > 0:
        raise ValueError(f"need signal > decoy > 0, got {signal}, {decoy}")
    return IntensitySetting.signal(signal), IntensitySetting.decoy(decoy), IntensitySetting.vacuum()


@dataclass
class PulsePair:
    """One emitted time-bin weak-coherent pulse pair (early and late bin).

    ``photon_count_tag`` is ground truth for oracle counters only; protocol
    logic never reads it.
    """

    amp_early: complex
    amp_late: complex
    basis: Basis
    bit: int
    intensity: IntensitySetting
    global_phase: float = 0.0
    slot_index: int = 0
    photon_count_tag: int | None = None
    center_freq_offset: float = 0.0
    pol_vector: tuple[float, float, float] = (1.0, 0.0, 0.0)
    arrival_offset: float = 0.0

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([self.amp_early, self.amp_late], dtype=complex)

    @property
    def mean_photon_number(self) -> float:
        return abs(self.amp_early) ** 2 + abs(self.amp_late) ** 2


def prepare_pulse_pair(
    basis: Basis | str,
    bit: int,
    intensity: IntensitySetting,
    params: StateParams,
    slot_index: int = 0,
) -> PulsePair:
    if intensity.mean_photon_number < 0:
        raise ValueError("negative mean photon number")
    basis = Basis(basis)
    amps = math.sqrt(intensity.mean_photon_number) * params.state_vector(basis, bit)
    return PulsePair(
        amp_early=complex(amps[0]),
        amp_late=complex(amps[1]),
        basis=basis,
        bit=bit,
        intensity=intensity,
        slot_index=slot_index,
    )


def randomize_phase(
    pair: PulsePair,
    rng: np.random.Generator,
    enabled: bool = True,
    levels: int | None = None,
) -> PulsePair:
    """Draw a fresh global phase.

    With ``levels`` set the phase is drawn uniformly from ``levels`` equally
    spaced values instead of the continuum.
    """
    if not enabled:
        return replace(pair, global_phase=0.0)
    if levels is None:
        phase = rng.uniform(0.0, 2.0 * math.pi)
    else:
        if levels < 1:
            raise ValueError("levels must be positive")
        phase = 2.0 * math.pi * rng.integers(levels) / levels
    return replace(pair, global_phase=float(phase))


def sample_photon_number(pair: PulsePair, rng: np.random.Generator) -> PulsePair:
    mean = pair.intensity.mean_photon_number
    tag = int(rng.poisson(mean)) if mean > 0 else 0
    return replace(pair, photon_count_tag=tag)


def phase_samples(rng: np.random.Generator, n: int, levels: int | None = None) -> np.ndarray:
    """Vectorised counterpart of :func:`randomize_phase`."""
    if levels is None:
        return rng.uniform(0.0, 2.0 * math.pi, size=n)
    return 2.0 * math.pi * rng.integers(levels, size=n) / levels
