"""Charlie's Bell-state measurement: 50:50 beam splitter and two threshold detectors.

Click patterns are 4-bit integers. Bit order::

    bit 0  D1 early      bit 2  D2 early
    bit 1  D1 late       bit 3  D2 late

Two detection models are provided. The coherent model takes the mean photon
number reaching each detector/bin for a fixed relative phase and treats the
four bins as independent Poisson threshold events. The photon-number model
takes Fock inputs ``(n_A, n_B)`` and returns exact pattern probabilities via
no-click generating functions, which is what the tagged Monte Carlo uses.
Averaged over the relative phase and over Poissonian photon numbers the two
coincide; the test suite checks this.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import comb

from .qubit_prep import PulsePair

D1E, D1L, D2E, D2L = 1, 2, 4, 8
N_PATTERNS = 16

# Output-bin bookkeeping in bit order: detector index, time bin, beam-splitter sign.
BIN_DETECTOR = np.array([0, 0, 1, 1])
BIN_SLOT = np.array([0, 1, 0, 1])
BIN_SIGN = np.array([1.0, 1.0, -1.0, -1.0])

# SUBSETS[S, o] is True when output bin o belongs to subset S.
SUBSETS = ((np.arange(N_PATTERNS)[:, None] >> np.arange(4)[None, :]) & 1).astype(bool)


def _mobius_matrix() -> np.ndarray:
    m = np.zeros((N_PATTERNS, N_PATTERNS))
    full = N_PATTERNS - 1
    for c in range(N_PATTERNS):
        comp = full ^ c
        for s in range(N_PATTERNS):
            if s & comp == comp:
                m[c, s] = (-1) ** bin(s & c).count("1")
    return m


# P(click set == C) = sum_S MOBIUS[C, S] * P(no click in S)
MOBIUS = _mobius_matrix()


class BellOutcome(str, enum.Enum):
    PSI_MINUS = "psi-"
    PSI_PLUS = "psi+"
    NONE = "none"


class QuadratureError(RuntimeError):
    """Phase average did not converge to the requested tolerance."""


@dataclass(frozen=True)
class DetectorModel:
    """Threshold single-photon detector. Times in seconds, rates in Hz.

    ``gate_rate`` is ``None`` for free-running detectors. The afterpulse
    probability is added to the dark probability of a bin for
    ``afterpulse_span`` seconds after the dead time expires.
    """

    name: str = "custom"
    efficiency: float = 1.0
    dark_prob_per_ns: float = 0.0
    dead_time: float = 0.0
    gate_rate: float | None = None
    max_count_rate: float = math.inf
    afterpulse_prob_per_ns: float = 0.0
    coincidence_window: float = 1.0  # ns
    afterpulse_span: float = math.inf
    jitter: float = 50e-12

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        for name in ("dark_prob_per_ns", "dead_time", "afterpulse_prob_per_ns",
                     "coincidence_window", "afterpulse_span", "jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_count_rate <= 0:
            raise ValueError("max_count_rate must be positive")
        if self.gate_rate is not None and self.gate_rate <= 0:
            raise ValueError("gate_rate must be positive or None")

    @property
    def dark_per_bin(self) -> float:
        return min(1.0, self.dark_prob_per_ns * self.coincidence_window)

    @property
    def afterpulse_per_bin(self) -> float:
        return min(1.0, self.afterpulse_prob_per_ns * self.coincidence_window)

    @property
    def recovery_time(self) -> float:
        """Dead time, lengthened where needed so clicks never exceed ``max_count_rate``."""
        cap = 0.0 if math.isinf(self.max_count_rate) else 1.0 / self.max_count_rate
        return max(self.dead_time, cap)

    @property
    def free_running(self) -> bool:
        return self.gate_rate is None


ID201 = DetectorModel("id201", 0.15, 1e-4, 10e-6, 8e6, 0.1e6, 1e-5)
ID210 = DetectorModel("id210", 0.15, 1e-5, 10e-6, 100e6, 0.1e6, 1e-5)
SNSPD = DetectorModel("snspd", 0.50, 1e-7, 40e-9, None, 2e6, 0.0)
IDEAL = DetectorModel("ideal", 1.0, 0.0, 0.0, None, math.inf, 0.0)

DETECTOR_PRESETS = {d.name: d for d in (ID201, ID210, SNSPD, IDEAL)}


def detector(choice) -> DetectorModel:
    if isinstance(choice, DetectorModel):
        return choice
    if isinstance(choice, str):
        try:
            return DETECTOR_PRESETS[choice]
        except KeyError:
            raise ValueError(f"unknown detector preset {choice!r}") from None
    if isinstance(choice, dict):
        data = dict(choice)
        base = detector(data.pop("preset", "ideal"))
        if "max_count_rate" in data and data["max_count_rate"] in ("inf", None):
            data["max_count_rate"] = math.inf
        return replace(base, **data)
    raise TypeError(f"cannot build a detector from {choice!r}")


@dataclass(frozen=True)
class BinMeans:
    n_d1_early: float
    n_d1_late: float
    n_d2_early: float
    n_d2_late: float

    def as_array(self) -> np.ndarray:
        return np.array([self.n_d1_early, self.n_d1_late, self.n_d2_early, self.n_d2_late])

    @property
    def total(self) -> float:
        return float(self.as_array().sum())


def gaussian_sigma(fwhm: float) -> float:
    return fwhm / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def mode_overlap(delta_t, delta_nu, pol_overlap, mode_width_fwhm):
    """Amplitude overlap of two Gaussian time-bin modes.

    ``pol_overlap`` is the power overlap of the polarisation states, so it
    enters through its square root.
    """
    pol = np.asarray(pol_overlap, dtype=float)
    if np.any((pol < 0) | (pol > 1)):
        raise ValueError("pol_overlap must lie in [0, 1]")
    sigma = gaussian_sigma(mode_width_fwhm)
    dt = np.asarray(delta_t, dtype=float)
    dnu = np.asarray(delta_nu, dtype=float)
    lam = np.sqrt(pol) * np.exp(-dt**2 / (4.0 * sigma**2)) * np.exp(-((math.pi * dnu * sigma) ** 2))
    return float(lam) if lam.ndim == 0 else lam


def bin_means(a, b, lam, dtheta) -> np.ndarray:
    """Vectorised beam-splitter output means.

    ``a`` and ``b`` have trailing axis (early, late). Returns trailing axis of
    length four in pattern-bit order.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex) * np.exp(1j * np.asarray(dtheta))[..., None]
    lam = np.asarray(lam, dtype=float)[..., None]
    dist = 0.5 * (1.0 - lam**2) * np.abs(b) ** 2
    d1 = 0.5 * np.abs(a + lam * b) ** 2 + dist
    d2 = 0.5 * np.abs(a - lam * b) ** 2 + dist
    return np.stack([d1[..., 0], d1[..., 1], d2[..., 0], d2[..., 1]], axis=-1)


def interfere(pair_a: PulsePair, pair_b: PulsePair, lam: float, delta_theta: float | None = None) -> BinMeans:
    if delta_theta is None:
        delta_theta = pair_b.global_phase - pair_a.global_phase
    n = bin_means(pair_a.amplitudes, pair_b.amplitudes, lam, delta_theta)
    return BinMeans(*map(float, n))


def _bin_params(det1: DetectorModel, det2: DetectorModel, extra_dark=(0.0, 0.0)):
    eta = np.array([det1.efficiency, det1.efficiency, det2.efficiency, det2.efficiency])
    d = np.array([det1.dark_per_bin + extra_dark[0]] * 2 + [det2.dark_per_bin + extra_dark[1]] * 2)
    return eta, np.clip(d, 0.0, 1.0)


def click_probabilities(means, det1: DetectorModel, det2: DetectorModel, extra_dark=(0.0, 0.0)) -> np.ndarray:
    """Per-bin click probability ``1 - (1 - d) exp(-eta n)``."""
    n = np.asarray(means.as_array() if isinstance(means, BinMeans) else means, dtype=float)
    if np.any(n < 0):
        raise ValueError("negative mean photon number")
    eta, d = _bin_params(det1, det2, extra_dark)
    return -np.expm1(np.log1p(-d) - eta * n)


def independent_pattern_probabilities(p) -> np.ndarray:
    """Pattern distribution for independent bins with click probabilities ``p``."""
    p = np.asarray(p, dtype=float)[..., None, :]
    return np.where(SUBSETS, p, 1.0 - p).prod(axis=-1)


def mask_table(block1: bool, block2: bool) -> np.ndarray:
    """Raw-to-observed pattern map when an early click blinds the late bin."""
    lut = np.arange(N_PATTERNS)
    if block1:
        lut = np.where(lut & D1E, lut & ~D1L, lut)
    if block2:
        lut = np.where(lut & D2E, lut & ~D2L, lut)
    return lut


def slot_mask(det1: DetectorModel, det2: DetectorModel, mode_separation: float) -> np.ndarray:
    return mask_table(det1.recovery_time > mode_separation, det2.recovery_time > mode_separation)


def remap_patterns(probs: np.ndarray, lut: np.ndarray) -> np.ndarray:
    out = np.zeros_like(probs)
    for raw in range(N_PATTERNS):
        out[..., lut[raw]] += probs[..., raw]
    return out


def _classify_int(pattern: int) -> BellOutcome:
    if pattern in (D1E | D2L, D1L | D2E):
        return BellOutcome.PSI_MINUS
    if pattern in (D1E | D1L, D2E | D2L):
        return BellOutcome.PSI_PLUS
    return BellOutcome.NONE


def pattern_from_bools(d1_early, d1_late, d2_early, d2_late) -> int:
    return int(bool(d1_early)) * D1E + int(bool(d1_late)) * D1L + int(bool(d2_early)) * D2E + int(bool(d2_late)) * D2L


def classify(pattern) -> BellOutcome:
    """Bell outcome of a click pattern (int or four booleans D1e, D1l, D2e, D2l).

    Any click beyond the two heralding ones vetoes the event.
    """
    if not isinstance(pattern, (int, np.integer)):
        pattern = pattern_from_bools(*pattern)
    if not 0 <= pattern < N_PATTERNS:
        raise ValueError(f"pattern out of range: {pattern}")
    return _classify_int(int(pattern))


# 0 = none, 1 = psi-, 2 = psi+
OUTCOME_CODE = {BellOutcome.NONE: 0, BellOutcome.PSI_MINUS: 1, BellOutcome.PSI_PLUS: 2}
CLASSIFY_LUT = np.array([OUTCOME_CODE[_classify_int(p)] for p in range(N_PATTERNS)], dtype=np.int8)
PSI_MINUS_PATTERNS = (D1E | D2L, D1L | D2E)
PSI_PLUS_PATTERNS = (D1E | D1L, D2E | D2L)


def outcome_probabilities(pattern_probs: np.ndarray) -> dict[BellOutcome, np.ndarray]:
    pm = pattern_probs[..., list(PSI_MINUS_PATTERNS)].sum(axis=-1)
    pp = pattern_probs[..., list(PSI_PLUS_PATTERNS)].sum(axis=-1)
    return {BellOutcome.PSI_MINUS: pm, BellOutcome.PSI_PLUS: pp, BellOutcome.NONE: 1.0 - pm - pp}


@dataclass
class DetectorClock:
    """Per-detector dead-time state along one simulated timeline."""

    dead_until: list = field(default_factory=lambda: [-math.inf, -math.inf])
    clicked: list = field(default_factory=lambda: [False, False])
    counts: list = field(default_factory=lambda: [0, 0])


def detect(
    means,
    det1: DetectorModel,
    det2: DetectorModel,
    rng: np.random.Generator | None = None,
    *,
    analytic: bool = False,
    clock: DetectorClock | None = None,
    t: float = 0.0,
    mode_separation: float = 2.5e-9,
):
    """Detect one pulse pair.

    Monte Carlo (``rng`` given): returns the observed four-boolean pattern,
    honouring dead time and afterpulsing through ``clock``. Analytic
    (``analytic=True``): returns the 16 pattern probabilities for these means
    with intra-slot dead-time masking; phase averaging is done by
    :func:`bell_event_probabilities`.
    """
    p = click_probabilities(means, det1, det2)
    if analytic:
        probs = independent_pattern_probabilities(p)
        return remap_patterns(probs, slot_mask(det1, det2, mode_separation))
    if rng is None:
        raise ValueError("Monte Carlo detection needs an rng")
    clock = clock or DetectorClock()
    dets = (det1, det2)
    u = rng.random(4)
    ap = rng.random(4)
    out = [False] * 4
    for slot, offset in ((0, 0.0), (1, mode_separation)):
        for k in (0, 1):
            bit = 2 * k + slot
            tau = t + offset
            if tau < clock.dead_until[k]:
                continue
            click = u[bit] < p[bit]
            det = dets[k]
            if not click and clock.clicked[k] and det.afterpulse_per_bin > 0:
                if tau < clock.dead_until[k] + det.afterpulse_span:
                    click = ap[bit] < det.afterpulse_per_bin
            if click:
                out[bit] = True
                clock.dead_until[k] = tau + det.recovery_time
                clock.clicked[k] = True
                clock.counts[k] += 1
    return tuple(out)


def phase_average(fn, tol: float = 1e-10, n_start: int = 16, n_max: int = 4096):
    """Average a smooth 2*pi-periodic function of the relative phase.

    The trapezoid rule is spectrally accurate here; the grid is doubled until
    every entry of successive estimates agrees to ``tol`` relative to its own
    magnitude (tiny high-loss probabilities are resolved as well as large ones).
    """
    n = n_start
    prev = np.mean(fn(2.0 * np.pi * np.arange(n) / n), axis=0)
    while n < n_max:
        n *= 2
        cur = np.mean(fn(2.0 * np.pi * np.arange(n) / n), axis=0)
        if np.all(np.abs(cur - prev) <= tol * np.abs(cur) + 1e-300):
            return cur
        prev = cur
    raise QuadratureError(f"phase average not converged with {n_max} nodes")


def coherent_pattern_probabilities(
    a,
    b,
    lam,
    det1: DetectorModel,
    det2: DetectorModel,
    mode_separation: float = 2.5e-9,
    phase_randomized: bool = True,
    extra_dark=(0.0, 0.0),
    tol: float = 1e-10,
) -> np.ndarray:
    """Observed pattern probabilities for coherent inputs ``a`` (Alice) and ``b`` (Bob).

    Broadcasts over leading axes of ``a``, ``b`` and ``lam``; the relative
    phase is averaged unless ``phase_randomized`` is False (then it is 0).
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    lam = np.asarray(lam, dtype=float)
    eta, d = _bin_params(det1, det2, extra_dark)
    log_q0 = np.log1p(-d)
    lut = slot_mask(det1, det2, mode_separation)

    def probs(theta):
        th = np.asarray(theta)
        n = bin_means(a[None], b[None], lam[None] if lam.ndim else lam, th.reshape((-1,) + (1,) * (a.ndim - 1)))
        p = -np.expm1(log_q0 - eta * n)
        return independent_pattern_probabilities(p)

    if phase_randomized:
        raw = phase_average(probs, tol=tol)
    else:
        raw = probs(np.zeros(1))[0]
    return remap_patterns(raw, lut)


def bell_event_probabilities(
    pair_a: PulsePair,
    pair_b: PulsePair,
    lam: float,
    det1: DetectorModel,
    det2: DetectorModel,
    mode_separation: float = 2.5e-9,
    tol: float = 1e-10,
) -> dict[BellOutcome, float]:
    probs = coherent_pattern_probabilities(
        pair_a.amplitudes, pair_b.amplitudes, lam, det1, det2, mode_separation, tol=tol
    )
    return {k: float(v) for k, v in outcome_probabilities(probs).items()}


def fock_kernel(ua, ub, lam, t_a, t_b, det1: DetectorModel, det2: DetectorModel):
    """Quadratic-form coefficients of the no-click generating function.

    Returns ``(k_aa, k_bb, k_ab2)`` with trailing axis over the 16 subsets,
    for Alice mode ``ua`` and Bob mode ``ub`` (trailing axis early/late).
    """
    ua = np.asarray(ua, dtype=complex)
    ub = np.asarray(ub, dtype=complex)
    lam = np.asarray(lam, dtype=float)[..., None]
    eta = np.array([det1.efficiency, det1.efficiency, det2.efficiency, det2.efficiency])
    ua_o = ua[..., BIN_SLOT]
    ub_o = ub[..., BIN_SLOT]
    kaa_o = 0.5 * eta * t_a * np.abs(ua_o) ** 2
    kbb_o = 0.5 * eta * t_b * np.abs(ub_o) ** 2
    kab_o = 0.5 * eta * math.sqrt(t_a * t_b) * lam * BIN_SIGN * np.conj(ua_o) * ub_o
    sub = SUBSETS.T.astype(float)
    kaa = kaa_o @ sub
    kbb = kbb_o @ sub
    kab = kab_o @ sub.astype(complex)
    return kaa, kbb, np.abs(kab) ** 2


def fock_no_click(kaa, kbb, kab2, n_a, n_b) -> np.ndarray:
    """P(no photon detected in subset) for Fock inputs ``|n_a>`` and ``|n_b>``.

    Sum over j of C(n_a, j) C(n_b, j) (1-k_aa)^(n_a-j) (1-k_bb)^(n_b-j) |k_ab|^(2j),
    the diagonal element of the normally ordered exponential.
    """
    n_a = np.asarray(n_a)[..., None]
    n_b = np.asarray(n_b)[..., None]
    ta = 1.0 - kaa
    tb = 1.0 - kbb
    jmax = int(np.max(np.minimum(n_a, n_b))) if np.size(n_a) else 0
    total = np.zeros(np.broadcast_shapes(ta.shape, n_a.shape, n_b.shape))
    for j in range(jmax + 1):
        ok = (n_a >= j) & (n_b >= j)
        ea = np.where(ok, n_a - j, 0)
        eb = np.where(ok, n_b - j, 0)
        term = comb(n_a, j) * comb(n_b, j) * ta**ea * tb**eb * kab2**j
        total = total + np.where(ok, term, 0.0)
    return total


def fock_pattern_probabilities(
    ua,
    ub,
    n_a,
    n_b,
    lam,
    t_a: float,
    t_b: float,
    det1: DetectorModel,
    det2: DetectorModel,
    mode_separation: float = 2.5e-9,
    extra_dark=(0.0, 0.0),
    masked: bool = True,
) -> np.ndarray:
    """Exact pattern probabilities for ``n_a`` photons from Alice and ``n_b`` from Bob.

    Photons are thinned by the arm transmittances and detector efficiencies;
    Bob's photons overlap Alice's internal mode with amplitude ``lam``.
    """
    kaa, kbb, kab2 = fock_kernel(ua, ub, lam, t_a, t_b, det1, det2)
    z = fock_no_click(kaa, kbb, kab2, n_a, n_b)
    light = z @ MOBIUS.T
    # Inclusion-exclusion over 16 subsets of values in [0, 1]: anything below
    # its round-off bound is an exact zero (e.g. the HOM-suppressed patterns).
    light = np.where(np.abs(light) < _MOBIUS_ROUNDOFF, 0.0, light)
    _, d = _bin_params(det1, det2, extra_dark)
    probs = add_dark_clicks(np.clip(light, 0.0, 1.0), d)
    if masked:
        probs = remap_patterns(probs, slot_mask(det1, det2, mode_separation))
    return probs


_MOBIUS_ROUNDOFF = 32 * np.finfo(float).eps


def add_dark_clicks(probs: np.ndarray, dark) -> np.ndarray:
    """OR independent per-bin dark clicks into a light-only pattern distribution.

    Every term is non-negative, so tiny dark-coincidence probabilities keep
    full relative precision.
    """
    out = np.array(probs, dtype=float, copy=True)
    pats = np.arange(N_PATTERNS)
    for o in range(4):
        d = float(dark[o])
        if d == 0.0:
            continue
        bit = 1 << o
        has = (pats & bit) != 0
        new = np.empty_like(out)
        new[..., ~has] = out[..., ~has] * (1.0 - d)
        new[..., has] = out[..., has] + d * out[..., pats[has] ^ bit]
        out = new
    return out


def live_fraction(click_prob_per_slot: float, slot_rate: float, det: DetectorModel) -> float:
    """Non-paralysable live fraction of a detector clicking at ``rate * p``."""
    r = slot_rate * click_prob_per_slot
    return 1.0 / (1.0 + r * det.recovery_time)


def dead_time_factor(p1: float, p2: float, slot_rate: float, det1: DetectorModel, det2: DetectorModel) -> float:
    """Fraction of slots in which both detectors are live.

    Recovery times include the ``max_count_rate`` cap, so counted rates never
    exceed ``min(max_count_rate, 1/dead_time)``.
    """
    return live_fraction(p1, slot_rate, det1) * live_fraction(p2, slot_rate, det2)


def afterpulse_fraction(p: float, slot_rate: float, det: DetectorModel) -> float:
    """Fraction of live time spent inside the afterpulse window."""
    if det.afterpulse_per_bin == 0 or p <= 0:
        return 0.0
    if math.isinf(det.afterpulse_span):
        return 1.0
    r = slot_rate * p * live_fraction(p, slot_rate, det)
    return -math.expm1(-r * det.afterpulse_span)
