"""Quantum channel: attenuation plus slow environmental drift.

A :class:`ChannelConfig` describes one fibre arm (Alice to Charlie or Bob to
Charlie). Drift is phenomenological: a temperature trace (sinusoid plus
Ornstein-Uhlenbeck noise) drives the differential arrival time linearly and
the polarisation mismatch as a random walk whose step scales with the
temperature slope. Laser frequency difference wanders independently.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, replace

import numpy as np

from .qubit_prep import PulsePair

ALICE = "alice"
BOB = "bob"


@dataclass(frozen=True)
class ChannelConfig:
    length_km: float = 0.0
    loss_per_km: float = 0.2
    extra_loss_db: float = 0.0
    drift_enabled: bool = False

    def __post_init__(self):
        if self.length_km < 0 or self.loss_per_km < 0 or self.extra_loss_db < 0:
            raise ValueError("channel losses and length must be non-negative")

    @property
    def loss_db(self) -> float:
        return self.length_km * self.loss_per_km + self.extra_loss_db

    @classmethod
    def from_loss(cls, loss_db: float, drift_enabled: bool = False) -> "ChannelConfig":
        return cls(length_km=0.0, extra_loss_db=loss_db, drift_enabled=drift_enabled)


def transmittance(cfg: ChannelConfig) -> float:
    return 10.0 ** (-cfg.loss_db / 10.0)


def db_to_transmittance(loss_db):
    return 10.0 ** (-np.asarray(loss_db, dtype=float) / 10.0)


def split_link(total_loss_db: float, alice_share: float = 0.5, drift_enabled: bool = False):
    """Split a total Alice-to-Bob loss between the two arms meeting at Charlie."""
    if not 0.0 <= alice_share <= 1.0:
        raise ValueError("alice_share must lie in [0, 1]")
    if total_loss_db < 0:
        raise ValueError("total loss must be non-negative")
    return (
        ChannelConfig.from_loss(total_loss_db * alice_share, drift_enabled),
        ChannelConfig.from_loss(total_loss_db * (1.0 - alice_share), drift_enabled),
    )


@dataclass(frozen=True)
class DriftState:
    """Instantaneous channel mismatch between the two arms.

    ``delta_arrival`` is Alice minus Bob arrival time (s), ``freq_diff`` Alice
    minus Bob laser frequency (Hz), ``pol_overlap`` the power overlap of the
    two polarisation states. ``time`` and ``temp_noise`` carry the trace
    clock and the OU component of the temperature.
    """

    delta_arrival: float = 0.0
    pol_overlap: float = 1.0
    freq_diff: float = 0.0
    temperature: float = 0.0
    time: float = 0.0
    temp_noise: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.pol_overlap <= 1.0:
            raise ValueError(f"pol_overlap must lie in [0, 1], got {self.pol_overlap}")


@dataclass(frozen=True)
class DriftModel:
    temp_mean: float = 0.0
    temp_amplitude: float = 0.0
    temp_period: float = 21600.0
    ou_rate: float = 1.0 / 1800.0
    ou_sigma: float = 0.0
    arrival_coeff: float = 0.0  # s per degC
    pol_coeff: float = 0.0  # rad per (degC/s) per sqrt(s)
    freq_sigma: float = 0.0  # Hz per sqrt(s)
    freq_bound: float = 2e9

    def smooth_temperature(self, t):
        return self.temp_mean - self.temp_amplitude * np.cos(2.0 * np.pi * np.asarray(t) / self.temp_period)

    def smooth_slope(self, t):
        w = 2.0 * np.pi / self.temp_period
        return self.temp_amplitude * w * np.sin(w * np.asarray(t))

    def initial_state(self, pol_overlap: float = 1.0) -> DriftState:
        return DriftState(
            delta_arrival=0.0,
            pol_overlap=pol_overlap,
            freq_diff=0.0,
            temperature=float(self.smooth_temperature(0.0)),
        )

    @classmethod
    def from_mapping(cls, data: dict, base: "DriftModel | None" = None) -> "DriftModel":
        base = base or cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown drift parameter(s): {sorted(unknown)}")
        return replace(base, **{k: float(v) for k, v in data.items()})


STATIC = DriftModel()

# Deployed-fibre trace: -14 degC to -4 degC over three hours moves the
# differential arrival time by 2.4 ns; polarisation decorrelates well within
# an hour on the ramp.
FIG3 = DriftModel(
    temp_mean=-9.0,
    temp_amplitude=5.0,
    temp_period=6 * 3600.0,
    ou_rate=1.0 / 1800.0,
    ou_sigma=0.3 * math.sqrt(2.0 / 1800.0),
    arrival_coeff=0.24e-9,
    pol_coeff=40.0,
    freq_sigma=2e6,
    freq_bound=2e9,
)

DRIFT_PRESETS = {"off": STATIC, "fig3": FIG3}


def drift_model(choice) -> DriftModel:
    """Resolve ``"off"``, ``"fig3"`` or a mapping of custom parameters."""
    if isinstance(choice, DriftModel):
        return choice
    if choice is None:
        return STATIC
    if isinstance(choice, str):
        try:
            return DRIFT_PRESETS[choice]
        except KeyError:
            raise ValueError(f"unknown drift preset {choice!r}") from None
    if isinstance(choice, dict):
        data = dict(choice)
        base = drift_model(data.pop("preset", "off"))
        return DriftModel.from_mapping(data, base)
    raise TypeError(f"cannot build a drift model from {choice!r}")


def pol_angle(overlap):
    """Angle between Stokes vectors giving power overlap ``cos^2(angle/2)``."""
    return 2.0 * np.arccos(np.sqrt(np.clip(overlap, 0.0, 1.0)))


def fold(x, lo, hi):
    """Reflect ``x`` back into ``[lo, hi]`` (mirror boundaries)."""
    span = hi - lo
    y = np.mod(np.asarray(x, dtype=float) - lo, 2.0 * span)
    return lo + np.where(y > span, 2.0 * span - y, y)


def _ou_decay(model: DriftModel, dt: float) -> tuple[float, float]:
    if model.ou_rate <= 0:
        return 1.0, model.ou_sigma * math.sqrt(dt)
    a = math.exp(-model.ou_rate * dt)
    s = model.ou_sigma * math.sqrt((1.0 - a * a) / (2.0 * model.ou_rate))
    return a, s


def step_drift(
    state: DriftState,
    dt: float,
    rng: np.random.Generator | None,
    model: DriftModel = FIG3,
) -> DriftState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = rng.standard_normal(3) if rng is not None else np.zeros(3)
    t_new = state.time + dt
    a, s = _ou_decay(model, dt)
    noise = a * state.temp_noise + s * z[0]
    temperature = float(model.smooth_temperature(t_new)) + noise
    d_temp = temperature - state.temperature

    delta = state.delta_arrival + model.arrival_coeff * d_temp

    slope = abs(float(model.smooth_slope(state.time + 0.5 * dt)))
    theta = pol_angle(state.pol_overlap) + model.pol_coeff * slope * math.sqrt(dt) * z[1]
    theta = float(fold(theta, 0.0, math.pi))
    pol = min(1.0, max(0.0, math.cos(0.5 * theta) ** 2))

    freq = state.freq_diff + model.freq_sigma * math.sqrt(dt) * z[2]
    freq = float(fold(freq, -model.freq_bound, model.freq_bound))

    return DriftState(
        delta_arrival=delta,
        pol_overlap=pol,
        freq_diff=freq,
        temperature=temperature,
        time=t_new,
        temp_noise=noise,
    )


def drift_trace(
    model: DriftModel,
    n_steps: int,
    dt: float,
    rng: np.random.Generator,
    start: DriftState | None = None,
) -> dict[str, np.ndarray]:
    """Free-running drift (no feedback) for many steps at once.

    Statistically equivalent to iterating :func:`step_drift`; boundaries are
    applied by folding the unconstrained walk.
    """
    from scipy.signal import lfilter

    start = start or model.initial_state()
    z = rng.standard_normal((n_steps, 3))
    t = start.time + dt * np.arange(1, n_steps + 1)
    a, s = _ou_decay(model, dt)
    noise, _ = lfilter([s], [1.0, -a], z[:, 0], zi=[a * start.temp_noise])
    temperature = model.smooth_temperature(t) + noise
    delta = start.delta_arrival + model.arrival_coeff * (temperature - start.temperature)
    slope = np.abs(model.smooth_slope(t - 0.5 * dt))
    theta = pol_angle(start.pol_overlap) + np.cumsum(model.pol_coeff * slope * math.sqrt(dt) * z[:, 1])
    pol = np.clip(np.cos(0.5 * fold(theta, 0.0, math.pi)) ** 2, 0.0, 1.0)
    freq = start.freq_diff + np.cumsum(model.freq_sigma * math.sqrt(dt) * z[:, 2])
    freq = fold(freq, -model.freq_bound, model.freq_bound)
    return {
        "time": t,
        "temperature": temperature,
        "delta_arrival": delta,
        "pol_overlap": pol,
        "freq_diff": freq,
    }


def _stokes_for_overlap(overlap: float) -> tuple[float, float, float]:
    angle = float(pol_angle(overlap))
    return (math.cos(angle), math.sin(angle), 0.0)


def apply_channel(pair: PulsePair, cfg: ChannelConfig, drift: DriftState, side: str) -> PulsePair:
    """Attenuate a pulse and stamp the drift of its arm.

    Bob's arm is the reference: all differential quantities are carried by
    Alice's pulse.
    """
    if side not in (ALICE, BOB):
        raise ValueError(f"side must be {ALICE!r} or {BOB!r}")
    amp = math.sqrt(transmittance(cfg))
    out = replace(pair, amp_early=pair.amp_early * amp, amp_late=pair.amp_late * amp)
    if side == BOB:
        return replace(out, arrival_offset=0.0, center_freq_offset=0.0, pol_vector=(1.0, 0.0, 0.0))
    return replace(
        out,
        arrival_offset=drift.delta_arrival,
        center_freq_offset=drift.freq_diff,
        pol_vector=_stokes_for_overlap(drift.pol_overlap),
    )


def pair_mismatch(alice: PulsePair, bob: PulsePair) -> tuple[float, float, float]:
    """Differential arrival time, frequency and polarisation power overlap."""
    sa = np.asarray(alice.pol_vector, dtype=float)
    sb = np.asarray(bob.pol_vector, dtype=float)
    overlap = 0.5 * (1.0 + float(np.dot(sa, sb)) / (np.linalg.norm(sa) * np.linalg.norm(sb)))
    return (
        alice.arrival_offset - bob.arrival_offset,
        alice.center_freq_offset - bob.center_freq_offset,
        min(1.0, max(0.0, overlap)),
    )
