"""Sifting, tallying, decoy-state bounds, secret-key rates and intensity optimisation.

Intensity cells are indexed ``(i_a, i_b)`` with index 0 = signal, 1 = decoy,
2 = vacuum on each side. Alice's ladder is ``(mu, nu, 0)`` and Bob's is
``(sigma, nu, 0)``. Bases are indexed 0 = Z, 1 = X.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .bsm import BellOutcome
from .qubit_prep import Basis, IntensityClass

log = logging.getLogger(__name__)

DEFAULT_F = 1.16
BASES = (Basis.Z, Basis.X)
LEVELS = (IntensityClass.SIGNAL, IntensityClass.DECOY, IntensityClass.VACUUM)

CSV_COLUMNS = (
    "loss_db", "config_id", "basis", "mu", "sigma", "nu",
    "Q_z", "e_z", "Q_x", "e_x",
    "Q11_lower", "e11_upper", "Q11_true", "e11_true",
    "S_per_gate", "S_per_sec", "err_S",
    "distance_km", "S_per_gate_raw",
)


class InsufficientIntensitiesError(ValueError):
    """Decoy estimation needs signal, decoy and vacuum on both sides."""


def basis_index(basis: Basis | str) -> int:
    return BASES.index(Basis(basis))


def level_index(cls: IntensityClass | str) -> int:
    return LEVELS.index(IntensityClass(cls))


# ----------------------------------------------------------------------------
# Sifting


@dataclass(frozen=True)
class SiftedRecord:
    basis: Basis
    alice_bit: int
    bob_bit_after_flip: int
    alice_intensity: IntensityClass
    bob_intensity: IntensityClass
    outcome: BellOutcome
    photon_tags: tuple[int, int] | None = None

    def __post_init__(self):
        if self.outcome is BellOutcome.NONE:
            raise ValueError("sifted records carry a Bell projection")

    @property
    def is_error(self) -> bool:
        return self.alice_bit != self.bob_bit_after_flip


@dataclass(frozen=True)
class Event:
    """One announced BSM result together with both preparations."""

    basis_a: Basis
    bit_a: int
    basis_b: Basis
    bit_b: int
    intensity_a: IntensityClass
    intensity_b: IntensityClass
    outcome: BellOutcome
    photon_tags: tuple[int, int] | None = None


def bob_flips(outcome: BellOutcome, basis: Basis) -> bool:
    """psi- anticorrelates both bases; psi+ anticorrelates Z and correlates X."""
    if outcome is BellOutcome.PSI_MINUS:
        return True
    if outcome is BellOutcome.PSI_PLUS:
        return basis is Basis.Z
    raise ValueError("no flip rule for a failed projection")


def sift(events: Iterable[Event], use_psi_plus: bool = False) -> Iterator[SiftedRecord]:
    """Keep matching-basis projections and apply Bob's bit flip."""
    for ev in events:
        basis_a, basis_b = Basis(ev.basis_a), Basis(ev.basis_b)
        if basis_a is not basis_b or ev.outcome is BellOutcome.NONE:
            continue
        if ev.outcome is BellOutcome.PSI_PLUS and not use_psi_plus:
            continue
        bob = ev.bit_b ^ int(bob_flips(ev.outcome, basis_a))
        yield SiftedRecord(basis_a, ev.bit_a, bob, IntensityClass(ev.intensity_a),
                           IntensityClass(ev.intensity_b), ev.outcome, ev.photon_tags)


def error_code_table(use_psi_plus: bool = False) -> np.ndarray:
    """``table[outcome_code, basis, bit_a ^ bit_b]`` is 0 (drop), 1 (correct) or 2 (error).

    Outcome codes follow :data:`mdiqkd.bsm.CLASSIFY_LUT` (0 none, 1 psi-, 2 psi+).
    """
    t = np.zeros((3, 2, 2), dtype=np.int8)
    # psi-: Bob flips, so equal raw bits are an error.
    t[1, :, 0] = 2
    t[1, :, 1] = 1
    if use_psi_plus:
        t[2, 0, 0], t[2, 0, 1] = 2, 1  # Z: flip
        t[2, 1, 0], t[2, 1, 1] = 1, 2  # X: no flip
    return t


# ----------------------------------------------------------------------------
# Tallying


def _zeros():
    return np.zeros((2, 3, 3))


@dataclass
class TallyCounters:
    """Mergeable counters indexed ``[basis, i_a, i_b]``.

    ``sent`` counts matching-basis pairs emitted; ``proj``/``err`` count
    sifted projections and errors. The ``*11`` arrays restrict to pairs where
    both pulses carried exactly one photon (ground truth, never used by the
    estimator). Counts may be fractional when they hold expectations.
    """

    levels_a: tuple[float, float, float]
    levels_b: tuple[float, float, float]
    sent: np.ndarray = field(default_factory=_zeros)
    proj: np.ndarray = field(default_factory=_zeros)
    err: np.ndarray = field(default_factory=_zeros)
    sent11: np.ndarray = field(default_factory=_zeros)
    proj11: np.ndarray = field(default_factory=_zeros)
    err11: np.ndarray = field(default_factory=_zeros)
    tagged: bool = True

    def __post_init__(self):
        for name in ("sent", "proj", "err", "sent11", "proj11", "err11"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (2, 3, 3):
                raise ValueError(f"{name} must have shape (2, 3, 3)")
            setattr(self, name, arr)

    def check(self) -> None:
        if np.any(self.err > self.proj) or np.any(self.proj > self.sent * (1 + 1e-12)):
            raise ValueError("counter invariant violated: errors <= projections <= sent")
        if np.any(self.proj11 > self.proj * (1 + 1e-12)) or np.any(self.sent11 > self.sent * (1 + 1e-12)):
            raise ValueError("tagged counters exceed full counters")

    def merge(self, other: "TallyCounters") -> "TallyCounters":
        if self.levels_a != other.levels_a or self.levels_b != other.levels_b:
            raise ValueError("cannot merge counters taken at different intensities")
        return TallyCounters(
            self.levels_a, self.levels_b,
            self.sent + other.sent, self.proj + other.proj, self.err + other.err,
            self.sent11 + other.sent11, self.proj11 + other.proj11, self.err11 + other.err11,
            self.tagged and other.tagged,
        )

    __add__ = merge

    def gain(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.sent > 0, self.proj / self.sent, np.nan)

    def error_rate(self) -> np.ndarray:
        """QBER per cell; NaN (undefined) where there were no projections."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.proj > 0, self.err / self.proj, np.nan)

    def undefined_error_rate(self) -> np.ndarray:
        return self.proj <= 0

    def single_photon_yield(self, basis: int) -> float:
        """Tagged (1,1) yield pooled over all cells of a basis."""
        if not self.tagged:
            return math.nan
        s = self.sent11[basis].sum()
        return float(self.proj11[basis].sum() / s) if s > 0 else math.nan

    def q11_true(self) -> float:
        """Single-photon gain of the signal cell in Z (tagged ground truth)."""
        a, b = self.levels_a[0], self.levels_b[0]
        return a * b * math.exp(-a - b) * self.single_photon_yield(0)

    def e11_true(self) -> float:
        """Single-photon X error rate, pooled over cells (tagged ground truth)."""
        if not self.tagged:
            return math.nan
        p = self.proj11[1].sum()
        return float(self.err11[1].sum() / p) if p > 0 else math.nan


def tally(records: Iterable[SiftedRecord], sent: np.ndarray, levels_a, levels_b,
          sent11: np.ndarray | None = None) -> TallyCounters:
    """Accumulate sifted records into counters given the emitted pair counts."""
    c = TallyCounters(tuple(levels_a), tuple(levels_b), sent=np.asarray(sent, dtype=float),
                      sent11=_zeros() if sent11 is None else sent11, tagged=sent11 is not None)
    for r in records:
        idx = (basis_index(r.basis), level_index(r.alice_intensity), level_index(r.bob_intensity))
        c.proj[idx] += 1
        c.err[idx] += r.is_error
        if r.photon_tags == (1, 1):
            c.proj11[idx] += 1
            c.err11[idx] += r.is_error
    c.check()
    return c


# ----------------------------------------------------------------------------
# Key rates


def binary_entropy(x):
    """Binary Shannon entropy with ``h2(0) = h2(1) = 0``."""
    arr = np.asarray(x, dtype=float)
    if np.any(np.isnan(arr)) or np.any((arr < 0) | (arr > 1)):
        raise ValueError(f"binary entropy argument outside [0, 1]: {x!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -arr * np.log2(arr) - (1.0 - arr) * np.log2(1.0 - arr)
    h = np.where((arr == 0) | (arr == 1), 0.0, h)
    return float(h) if h.ndim == 0 else h


def key_rate_basic(q_z: float, e_x: float, e_z: float, f: float = DEFAULT_F) -> float:
    """Secret bits per gate for single-photon sources (raw, may be negative)."""
    return q_z * (1.0 - binary_entropy(e_x)) - q_z * f * binary_entropy(e_z)


@dataclass(frozen=True)
class KeyRateInputs:
    q11_z_lower: float
    e11_x_upper: float
    q_musigma_z: float
    e_musigma_z: float
    f: float = DEFAULT_F

    def __post_init__(self):
        for name in ("q11_z_lower", "e11_x_upper", "q_musigma_z", "e_musigma_z"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.f < 1.0:
            raise ValueError("error-correction efficiency f must be >= 1")


def key_rate_decoy(inputs: KeyRateInputs) -> float:
    """Decoy-state secret bits per gate (raw, may be negative).

    An X error bound above 1/2 carries no information, so the entropy is
    evaluated at ``min(e11, 1/2)``.
    """
    e11 = min(inputs.e11_x_upper, 0.5)
    return (inputs.q11_z_lower * (1.0 - binary_entropy(e11))
            - inputs.q_musigma_z * inputs.f * binary_entropy(inputs.e_musigma_z))


def report_rate(raw: float) -> float:
    """Negative (or undefined) rates are reported as zero."""
    return raw if raw > 0 else 0.0


# ----------------------------------------------------------------------------
# Decoy-state bounds


@dataclass(frozen=True)
class DecoyBounds:
    q11_z_lower: float
    e11_x_upper: float
    y11_z_lower: float
    y11_x_lower: float
    physical: bool
    note: str = ""


def _validate_levels(levels_a, levels_b):
    for side, lv in (("Alice", levels_a), ("Bob", levels_b)):
        if len(lv) != 3 or lv[2] != 0.0 or not lv[0] > lv[1] > 0.0:
            raise InsufficientIntensitiesError(
                f"{side} needs signal > decoy > vacuum = 0, got {tuple(lv)}")


def _bracket(q: np.ndarray, a: float, b: float, i: int, j: int) -> float:
    """Photon-number sum over n, m >= 1 of the gains at cell (i, j)."""
    return q[i, j] * math.exp(a + b) - q[i, 2] * math.exp(a) - q[2, j] * math.exp(b) + q[2, 2]


def single_photon_yield_lower(q: np.ndarray, levels_a, levels_b) -> float:
    """Lower bound on the (1,1) yield from a 3x3 table of gains.

    With x_nm = a^n b^m / (n! m!) and r = min(A/a, B/b), the combination
    ``r AB/(ab) K(a,b) - K(A,B)`` has a non-positive coefficient on every
    yield with n + m >= 3, so dividing by ``AB (r - 1)`` bounds Y11 from
    below for any non-negative higher-order yields.
    """
    big_a, small_a = levels_a[0], levels_a[1]
    big_b, small_b = levels_b[0], levels_b[1]
    r = min(big_a / small_a, big_b / small_b)
    c = r * big_a * big_b / (small_a * small_b)
    k_small = _bracket(q, small_a, small_b, 1, 1)
    k_big = _bracket(q, big_a, big_b, 0, 0)
    return (c * k_small - k_big) / (big_a * big_b * (r - 1.0))


def decoy_estimate(counters: TallyCounters) -> DecoyBounds:
    """Three-intensity bounds on the single-photon Z gain and X error rate."""
    _validate_levels(counters.levels_a, counters.levels_b)
    if np.any(counters.sent <= 0):
        raise InsufficientIntensitiesError("every basis/intensity cell needs emitted pairs")
    gains = counters.proj / counters.sent
    egains = counters.err / counters.sent
    la, lb = counters.levels_a, counters.levels_b
    y11_z = single_photon_yield_lower(gains[0], la, lb)
    y11_x = single_photon_yield_lower(gains[1], la, lb)
    a, b = la[1], lb[1]
    q11 = la[0] * lb[0] * math.exp(-la[0] - lb[0]) * y11_z
    notes = []
    if y11_x > 0:
        e11 = _bracket(egains[1], a, b, 1, 1) / (a * b * y11_x)
        e11 = max(e11, 0.0)
    else:
        e11 = math.inf
        notes.append("X single-photon yield bound is non-positive")
    if y11_z <= 0:
        notes.append("Z single-photon yield bound is non-positive")
    physical = not notes
    if not physical:
        log.info("decoy bounds non-physical: %s", "; ".join(notes))
    return DecoyBounds(q11, e11, y11_z, y11_x, physical, "; ".join(notes))


def key_rate_from_counters(counters: TallyCounters, f: float = DEFAULT_F) -> tuple[float, DecoyBounds]:
    """Raw decoy key rate per gate and the bounds it used.

    Non-physical bounds yield a non-positive rate: the single-photon gain is
    floored at zero and an uninformative X error bound is evaluated at 1/2.
    """
    bounds = decoy_estimate(counters)
    q = counters.proj[0, 0, 0] / counters.sent[0, 0, 0]
    if counters.proj[0, 0, 0] > 0:
        e = counters.err[0, 0, 0] / counters.proj[0, 0, 0]
    else:
        e = 0.0
    inputs = KeyRateInputs(
        q11_z_lower=min(max(bounds.q11_z_lower, 0.0), 1.0),
        e11_x_upper=min(bounds.e11_x_upper, 0.5),
        q_musigma_z=q,
        e_musigma_z=e,
        f=f,
    )
    return key_rate_decoy(inputs), bounds


def key_rate_stderr(counters: TallyCounters, f: float = DEFAULT_F) -> float:
    """Poissonian 1-sigma uncertainty of the decoy key rate.

    Correct and erroneous projection counts of every cell are treated as
    independent Poisson variables and propagated by central differences.
    """
    base_err = counters.err
    base_ok = counters.proj - counters.err

    def rate(ok, err):
        c = TallyCounters(counters.levels_a, counters.levels_b, counters.sent, ok + err, err,
                          counters.sent11, counters.proj11, counters.err11, counters.tagged)
        return key_rate_from_counters(c, f)[0]

    var = 0.0
    for arr_name in ("ok", "err"):
        base = base_ok if arr_name == "ok" else base_err
        for idx in np.ndindex(base.shape):
            n = base[idx]
            if n <= 0:
                continue
            h = max(1e-3 * math.sqrt(n), 1e-6 * n)
            lo = base.copy()
            hi = base.copy()
            lo[idx] = max(n - h, 0.0)
            hi[idx] = n + h
            if arr_name == "ok":
                d = (rate(hi, base_err) - rate(lo, base_err)) / (hi[idx] - lo[idx])
            else:
                d = (rate(base_ok, hi) - rate(base_ok, lo)) / (hi[idx] - lo[idx])
            var += d * d * n
    return math.sqrt(var)


def bits_per_second(
    s_gate: float,
    qubit_rate: float,
    duty: float = 1.0,
    dead_time_factor: float = 1.0,
    gate_rate: float | None = None,
) -> float:
    """Secret bits per second; the emission rate is clamped to the detector gate rate."""
    if qubit_rate <= 0:
        raise ValueError("qubit_rate must be positive")
    if not 0.0 <= duty <= 1.0 or not 0.0 <= dead_time_factor <= 1.0:
        raise ValueError("duty and dead_time_factor must lie in [0, 1]")
    rate = min(qubit_rate, gate_rate) if gate_rate else qubit_rate
    return report_rate(s_gate) * rate * duty * dead_time_factor


# ----------------------------------------------------------------------------
# Intensity optimisation


@dataclass(frozen=True)
class IntensityBounds:
    mu: tuple[float, float] = (0.02, 1.5)
    sigma: tuple[float, float] = (0.02, 1.5)
    nu: tuple[float, float] = (0.05, 0.5)
    max_decoy_fraction: float = 0.9  # nu <= fraction * min(mu, sigma)

    def feasible(self, p) -> bool:
        mu, sigma, nu = p
        return (self.mu[0] <= mu <= self.mu[1] and self.sigma[0] <= sigma <= self.sigma[1]
                and self.nu[0] <= nu <= self.nu[1]
                and nu <= self.max_decoy_fraction * min(mu, sigma))


@dataclass
class OptimizationResult:
    mu: float
    sigma: float
    nu: float
    rate: float
    evaluations: int
    probes: list = field(default_factory=list, repr=False)

    @property
    def zero_key(self) -> bool:
        return not self.rate > 0

    @property
    def point(self) -> tuple[float, float, float]:
        return (self.mu, self.sigma, self.nu)


def optimize_intensities(
    evaluate: Callable[[float, float, float], float],
    bounds: IntensityBounds = IntensityBounds(),
    grid_points: int = 6,
    symmetric: bool = False,
    min_step: float = 1.01,
    keep_probes: bool = False,
) -> OptimizationResult:
    """Maximise ``evaluate(mu, sigma, nu)`` by a log grid then coordinate descent.

    The returned point is the best of every point probed, and it is
    confirmed locally optimal against +-10% moves of each coordinate.
    With ``symmetric`` the search is restricted to ``mu == sigma``.
    """
    cache: dict[tuple, float] = {}

    def f(p):
        p = tuple(float(x) for x in p)
        if symmetric:
            p = (p[0], p[0], p[2])
        if not bounds.feasible(p):
            return -math.inf
        if p not in cache:
            v = float(evaluate(*p))
            cache[p] = v if math.isfinite(v) else -math.inf
        return cache[p]

    def geo(lo, hi, n):
        return np.geomspace(lo, hi, n)

    mus = geo(*bounds.mu, grid_points)
    sigmas = mus if symmetric else geo(*bounds.sigma, grid_points)
    nus = geo(*bounds.nu, grid_points)
    for m in mus:
        for s in (sigmas if not symmetric else [m]):
            for n in nus:
                f((m, s, n))
    if not cache:
        raise ValueError("intensity bounds admit no feasible grid point")
    best = max(cache, key=cache.get)

    axes = (0, 2) if symmetric else (0, 1, 2)
    step = 1.5
    while True:
        improved = True
        while improved:
            improved = False
            for ax in axes:
                for factor in (step, 1.0 / step):
                    cand = list(best)
                    cand[ax] *= factor
                    if symmetric and ax == 0:
                        cand[1] = cand[0]
                    if f(cand) > cache[best]:
                        best = tuple(cand) if not symmetric else (cand[0], cand[0], cand[2])
                        improved = True
        if step <= min_step:
            # final +-10% confirmation probes
            moved = False
            for ax in axes:
                for factor in (1.1, 1.0 / 1.1, 0.9):
                    cand = list(best)
                    cand[ax] *= factor
                    if symmetric and ax == 0:
                        cand[1] = cand[0]
                    if f(cand) > cache[best]:
                        best = tuple(cand) if not symmetric else (cand[0], cand[0], cand[2])
                        moved = True
            if not moved:
                break
            step = 1.1
            continue
        step = math.sqrt(step)

    best = max(cache, key=cache.get)
    return OptimizationResult(*best, rate=cache[best], evaluations=len(cache),
                              probes=list(cache.items()) if keep_probes else [])


# ----------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def write_csv(rows: Sequence[dict], path_or_file, columns: Sequence[str] = CSV_COLUMNS) -> None:
    """Write rows with a fixed column order and round-trip float formatting."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    finally:
        if own:
            fh.close()
