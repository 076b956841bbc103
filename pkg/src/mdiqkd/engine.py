"""Evaluation engine shared by the runner: analytic expectations and Monte Carlo.

Every emitted pair belongs to one of 144 *groups*: an intensity cell
``(i_a, i_b)`` times a preparation combo ``(basis_a, bit_a, basis_b, bit_b)``.
The analytic path turns per-group pattern probabilities into expected
counters; the Monte Carlo path samples click patterns per slot (or, for
memoryless detectors, per group in one multinomial draw) and tallies them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import poisson

from . import bsm, kernels
from .bsm import DetectorModel
from .postprocess import DEFAULT_F, TallyCounters, error_code_table
from .qubit_prep import StateParams

# combos: (basis_a, bit_a, basis_b, bit_b); basis 0 = Z, 1 = X
COMBOS = np.array([(ba, xa, bb, xb) for ba in (0, 1) for xa in (0, 1) for bb in (0, 1) for xb in (0, 1)])
N_COMBOS = len(COMBOS)
# groups: (i_a, i_b, combo)
GROUPS = np.array([(ia, ib, c) for ia in range(3) for ib in range(3) for c in range(N_COMBOS)])
N_GROUPS = len(GROUPS)
GROUP_CELL_A = GROUPS[:, 0]
GROUP_CELL_B = GROUPS[:, 1]
GROUP_COMBO = GROUPS[:, 2]
GROUP_MATCHED = COMBOS[GROUP_COMBO, 0] == COMBOS[GROUP_COMBO, 2]
GROUP_BASIS = COMBOS[GROUP_COMBO, 0]
GROUP_PARITY = COMBOS[GROUP_COMBO, 1] ^ COMBOS[GROUP_COMBO, 3]
MATCHED = np.flatnonzero(GROUP_MATCHED)

_PATTERN_HAS_D1 = (np.arange(16) & (bsm.D1E | bsm.D1L)) != 0
_PATTERN_HAS_D2 = (np.arange(16) & (bsm.D2E | bsm.D2L)) != 0


@dataclass(frozen=True)
class System:
    """Hardware of one configuration: sources, detectors and BSM options."""

    state_a: StateParams
    state_b: StateParams
    det1: DetectorModel
    det2: DetectorModel
    phase_randomized: bool = True
    use_psi_plus: bool = False
    f: float = DEFAULT_F

    @property
    def mode_separation(self) -> float:
        return self.state_a.mode_separation

    @property
    def mode_width(self) -> float:
        return 0.5 * (self.state_a.mode_width_fwhm + self.state_b.mode_width_fwhm)

    def mode_vectors(self) -> tuple[np.ndarray, np.ndarray]:
        basis = ("Z", "X")
        ua = np.array([self.state_a.state_vector(basis[c[0]], int(c[1])) for c in COMBOS])
        ub = np.array([self.state_b.state_vector(basis[c[2]], int(c[3])) for c in COMBOS])
        return ua, ub

    def memoryless(self, period: float) -> bool:
        """True when no click can influence a later slot."""
        limit = period - self.mode_separation
        no_ap = self.det1.afterpulse_per_bin == 0 and self.det2.afterpulse_per_bin == 0
        return no_ap and self.det1.recovery_time <= limit and self.det2.recovery_time <= limit


def ladders(mu: float, sigma: float, nu: float):
    return (mu, nu, 0.0), (sigma, nu, 0.0)


def _as_levels(lam) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.ndim != 1:
        raise ValueError("overlap levels must be one-dimensional")
    return lam


def _group_amplitudes(system: System, levels_a, levels_b, t_a, t_b, groups):
    ua, ub = system.mode_vectors()
    amp_a = np.sqrt(np.asarray(levels_a)[GROUP_CELL_A[groups]] * t_a)[:, None] * ua[GROUP_COMBO[groups]]
    amp_b = np.sqrt(np.asarray(levels_b)[GROUP_CELL_B[groups]] * t_b)[:, None] * ub[GROUP_COMBO[groups]]
    return amp_a, amp_b


def group_patterns(system: System, levels_a, levels_b, t_a, t_b, lam, *, groups=None,
                   extra_dark=(0.0, 0.0)) -> np.ndarray:
    """Observed pattern probabilities of shape ``(len(lam), len(groups), 16)``.

    Intra-slot dead-time masking is applied.
    """
    groups = np.arange(N_GROUPS) if groups is None else np.asarray(groups)
    lam = _as_levels(lam)
    amp_a, amp_b = _group_amplitudes(system, levels_a, levels_b, t_a, t_b, groups)
    shape = (len(lam), len(groups), 2)
    a = np.broadcast_to(amp_a[None], shape)
    b = np.broadcast_to(amp_b[None], shape)
    lam_full = np.broadcast_to(lam[:, None], shape[:2])
    return bsm.coherent_pattern_probabilities(
        a, b, lam_full, system.det1, system.det2, system.mode_separation,
        phase_randomized=system.phase_randomized, extra_dark=extra_dark,
    )


def raw_group_patterns(system: System, levels_a, levels_b, t_a, t_b, lam, extra_dark=(0.0, 0.0)) -> np.ndarray:
    """Unmasked fixed-phase pattern probabilities (for un-randomised Monte Carlo)."""
    lam = _as_levels(lam)
    amp_a, amp_b = _group_amplitudes(system, levels_a, levels_b, t_a, t_b, np.arange(N_GROUPS))
    n = bsm.bin_means(amp_a[None], amp_b[None], np.broadcast_to(lam[:, None], (len(lam), N_GROUPS)), 0.0)
    p = bsm.click_probabilities(n, system.det1, system.det2, extra_dark)
    return bsm.independent_pattern_probabilities(p)


def fock_table(system: System, t_a, t_b, lam, n_max: int, *, masked: bool, extra_dark=(0.0, 0.0)) -> np.ndarray:
    """Fock-input pattern probabilities ``[level, combo, n_a, n_b, pattern]``."""
    lam = _as_levels(lam)
    ua, ub = system.mode_vectors()
    n = np.arange(n_max + 1)
    return bsm.fock_pattern_probabilities(
        ua[None, :, None, None, :], ub[None, :, None, None, :],
        n[None, None, :, None], n[None, None, None, :],
        lam[:, None, None, None], t_a, t_b, system.det1, system.det2,
        system.mode_separation, extra_dark, masked,
    )


def _outcome_weights(use_psi_plus: bool) -> tuple[np.ndarray, np.ndarray]:
    """Per (group, pattern): 1 if a sifted projection / a sifted error."""
    table = error_code_table(use_psi_plus)
    code = table[bsm.CLASSIFY_LUT[None, :], GROUP_BASIS[:, None], GROUP_PARITY[:, None]]
    code = np.where(GROUP_MATCHED[:, None], code, 0)
    return (code >= 1).astype(float), (code == 2).astype(float)


_WEIGHTS = {flag: _outcome_weights(flag) for flag in (False, True)}


def _cell_sum(values: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Sum trailing group axis into ``[..., basis, i_a, i_b]``."""
    out = np.zeros(values.shape[:-1] + (2, 3, 3))
    for k, g in enumerate(groups):
        if GROUP_MATCHED[g]:
            out[..., GROUP_BASIS[g], GROUP_CELL_A[g], GROUP_CELL_B[g]] += values[..., k]
    return out


@dataclass
class ExpectedTables:
    """Per-overlap-level expectations of one emitted pair per matched-basis cell."""

    levels_a: tuple
    levels_b: tuple
    proj: np.ndarray  # (L, 2, 3, 3)
    err: np.ndarray
    sent11: np.ndarray  # (2, 3, 3)
    proj11: np.ndarray  # (L, 2, 3, 3)
    err11: np.ndarray
    click: np.ndarray | None = None  # (L, 2) per-detector click prob per slot over all groups
    tagged: bool = True

    def counters(self, weights=None) -> TallyCounters:
        n = self.proj.shape[0]
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
        w = w / w.sum()
        return TallyCounters(
            self.levels_a, self.levels_b,
            sent=np.ones((2, 3, 3)),
            proj=np.tensordot(w, self.proj, 1), err=np.tensordot(w, self.err, 1),
            sent11=self.sent11.copy(),
            proj11=np.tensordot(w, self.proj11, 1), err11=np.tensordot(w, self.err11, 1),
            tagged=self.tagged,
        )

    def click_probability(self, weights=None) -> np.ndarray:
        n = self.click.shape[0]
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
        return np.tensordot(w / w.sum(), self.click, 1)


def expected_tables(system: System, levels_a, levels_b, t_a, t_b, lam, *,
                    extra_dark=(0.0, 0.0), with_clicks=False, with_truth=True) -> ExpectedTables:
    """Expected per-pair gains, error gains and tagged truth for each overlap level."""
    lam = _as_levels(lam)
    groups = np.arange(N_GROUPS) if with_clicks else MATCHED
    probs = group_patterns(system, levels_a, levels_b, t_a, t_b, lam, groups=groups, extra_dark=extra_dark)
    w_proj, w_err = _WEIGHTS[system.use_psi_plus]
    proj_g = np.einsum("lgp,gp->lg", probs, w_proj[groups])
    err_g = np.einsum("lgp,gp->lg", probs, w_err[groups])
    proj = _cell_sum(proj_g, groups) / 4.0  # four bit combos per basis and cell
    err = _cell_sum(err_g, groups) / 4.0

    la, lb = np.asarray(levels_a), np.asarray(levels_b)
    p11_cell = la[:, None] * np.exp(-la[:, None]) * lb[None, :] * np.exp(-lb[None, :])
    sent11 = np.broadcast_to(p11_cell, (2, 3, 3)).copy()
    tagged = system.phase_randomized and with_truth
    if tagged:
        f11 = fock_table(system, t_a, t_b, lam, 1, masked=True, extra_dark=extra_dark)[:, :, 1, 1, :]
        f11_g = f11[:, GROUP_COMBO[groups], :]
        proj11_g = np.einsum("lgp,gp->lg", f11_g, w_proj[groups])
        err11_g = np.einsum("lgp,gp->lg", f11_g, w_err[groups])
        proj11 = _cell_sum(proj11_g, groups) / 4.0 * sent11
        err11 = _cell_sum(err11_g, groups) / 4.0 * sent11
    else:
        proj11 = np.full_like(proj, np.nan)
        err11 = np.full_like(err, np.nan)

    click = None
    if with_clicks:
        click = np.stack([probs[..., _PATTERN_HAS_D1].sum(-1).mean(-1),
                          probs[..., _PATTERN_HAS_D2].sum(-1).mean(-1)], axis=-1)
    return ExpectedTables(tuple(map(float, levels_a)), tuple(map(float, levels_b)),
                          proj, err, sent11, proj11, err11, click, tagged)


def afterpulse_dark(system: System, click: np.ndarray, slot_rate: float) -> tuple[float, float]:
    """Effective extra dark probability per bin from afterpulsing."""
    return tuple(
        det.afterpulse_per_bin * bsm.afterpulse_fraction(float(p), slot_rate, det)
        for det, p in zip((system.det1, system.det2), click)
    )


@dataclass
class AnalyticResult:
    counters: TallyCounters
    dead_time_factor: float
    extra_dark: tuple[float, float]


def analytic_point(system: System, levels_a, levels_b, t_a, t_b, lam, weights=None,
                   slot_rate: float = 1e6) -> AnalyticResult:
    """Expected counters with afterpulsing folded into the dark probability.

    The afterpulse floor depends on how often detectors click, so it is
    found by a short fixed-point iteration.
    """
    extra = (0.0, 0.0)
    tables = None
    for _ in range(3):
        tables = expected_tables(system, levels_a, levels_b, t_a, t_b, lam,
                                 extra_dark=extra, with_clicks=True)
        new = afterpulse_dark(system, tables.click_probability(weights), slot_rate)
        if np.allclose(new, extra, rtol=1e-9, atol=0.0):
            break
        extra = new
    click = tables.click_probability(weights)
    period = 1.0 / slot_rate
    if system.memoryless(period):
        dtf = 1.0
    else:
        dtf = bsm.dead_time_factor(click[0], click[1], slot_rate, system.det1, system.det2)
    return AnalyticResult(tables.counters(weights), float(dtf), tuple(map(float, extra)))


def compress_levels(values, k: int = 16):
    """Split sorted samples into ``k`` equal-count chunks.

    Returns ``(levels, weights, assignment)``: chunk means, chunk weights and
    each sample's chunk index.
    """
    values = np.asarray(values, dtype=float)
    k = max(1, min(k, len(values)))
    order = np.argsort(values, kind="stable")
    chunks = np.array_split(order, k)
    levels = np.array([values[c].mean() for c in chunks])
    weights = np.array([len(c) for c in chunks], dtype=float) / len(values)
    assign = np.empty(len(values), dtype=np.int64)
    for i, c in enumerate(chunks):
        assign[c] = i
    return levels, weights, assign


# ----------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MCResult:
    counters: TallyCounters
    detector_clicks: np.ndarray  # clicks per detector
    duration: float  # simulated seconds of emission
    pattern_hist: np.ndarray = field(repr=False, default=None)  # (144, 16)
    pattern_hist11: np.ndarray = field(repr=False, default=None)
    path: str = "iid"


def _slot_plan(n_pairs: int, block_size: int, n_trace: int, schedule: str):
    """Per-block start, size, trace index and group for ``n_pairs`` slots.

    The random schedule (the physical one: every slot picks its basis, bit
    and intensities afresh) uses one block per trace sample and leaves the
    group to be drawn per slot. The block schedule cycles through all groups;
    every group receives the same number of slots (to within one), split
    over whole cycles of blocks of about ``block_size``. With dead time the
    block schedule distorts gains, since each block sets its own click rate.
    """
    if schedule == "block":
        cycles = max(1, round(n_pairs / (N_GROUPS * block_size)))
        per_group = n_pairs // N_GROUPS + (np.arange(N_GROUPS) < n_pairs % N_GROUPS)
        # sizes[k, g]: slots of group g in cycle k
        sizes = per_group[None, :] // cycles + (np.arange(cycles)[:, None] < (per_group % cycles)[None, :])
        group = np.tile(np.arange(N_GROUPS), cycles)
        sizes = sizes.ravel()
        keep = sizes > 0
        group, sizes = group[keep], sizes[keep]
    elif schedule == "random":
        n_blocks = min(n_pairs, max(n_trace, 1))
        sizes = np.diff(np.linspace(0, n_pairs, n_blocks + 1).round().astype(np.int64))
        group = None
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    trace = (starts * n_trace) // n_pairs
    return starts, sizes, trace, group


def _counters_from_hist(hist, hist11, levels_a, levels_b, use_psi_plus, tagged, sent_g, sent11_g):
    w_proj, w_err = _WEIGHTS[use_psi_plus]
    groups = np.arange(N_GROUPS)
    proj = _cell_sum((hist * w_proj).sum(-1), groups)
    err = _cell_sum((hist * w_err).sum(-1), groups)
    sent = _cell_sum(sent_g.astype(float), groups)
    if tagged:
        proj11 = _cell_sum((hist11 * w_proj).sum(-1), groups)
        err11 = _cell_sum((hist11 * w_err).sum(-1), groups)
        sent11 = _cell_sum(sent11_g.astype(float), groups)
    else:
        proj11 = err11 = sent11 = np.zeros((2, 3, 3))
    c = TallyCounters(tuple(map(float, levels_a)), tuple(map(float, levels_b)),
                      sent, proj, err, sent11, proj11, err11, tagged)
    c.check()
    return c


def simulate_mc(
    system: System,
    levels_a,
    levels_b,
    t_a: float,
    t_b: float,
    n_pairs: int,
    rng: np.random.Generator,
    *,
    slot_rate: float = 1e6,
    lam_trace=1.0,
    max_levels: int = 16,
    schedule: str = "random",
    block_size: int = 10_000,
    force_sequential: bool = False,
    backend: str | None = None,
    chunk: int = 1 << 18,
) -> MCResult:
    """Sample ``n_pairs`` emitted pairs and tally sifted projections.

    ``lam_trace`` is the mode overlap over the acquisition, mapped onto the
    slots proportionally in time; it is quantised to at most ``max_levels``
    representative values. Memoryless detectors use one exact multinomial
    draw per (group, overlap level); otherwise slots are sampled in time
    order and passed through the dead-time/afterpulse kernel.
    """
    if n_pairs <= 0:
        raise ValueError("n_pairs must be positive")
    trace = _as_levels(lam_trace)
    lam_levels, _, assign = compress_levels(trace, max_levels)
    starts, sizes, trace_idx, group = _slot_plan(n_pairs, block_size, len(trace), schedule)
    block_level = assign[trace_idx]
    period = 1.0 / slot_rate
    tagged = system.phase_randomized
    L = len(lam_levels)

    if system.memoryless(period) and not force_sequential:
        # counts per (level, group)
        counts = np.zeros((L, N_GROUPS), dtype=np.int64)
        if group is not None:
            np.add.at(counts, (block_level, group), sizes)
        else:
            per_level = np.bincount(block_level, weights=sizes, minlength=L).astype(np.int64)
            for lv in range(L):
                counts[lv] = rng.multinomial(per_level[lv], np.full(N_GROUPS, 1.0 / N_GROUPS))
        probs = group_patterns(system, levels_a, levels_b, t_a, t_b, lam_levels)  # (L, G, 16)
        if tagged:
            la, lb = np.asarray(levels_a), np.asarray(levels_b)
            p11 = (la * np.exp(-la))[GROUP_CELL_A] * (lb * np.exp(-lb))[GROUP_CELL_B]
            f11 = fock_table(system, t_a, t_b, lam_levels, 1, masked=True)[:, :, 1, 1, :]
            joint11 = p11[None, :, None] * f11[:, GROUP_COMBO, :]
            other = np.clip(probs - joint11, 0.0, None)
            pv = np.concatenate([joint11, other], axis=-1)
        else:
            pv = probs
        pv = pv / pv.sum(-1, keepdims=True)
        draws = rng.multinomial(counts, pv)  # (L, G, 16 or 32)
        draws = draws.sum(0)
        hist11 = draws[:, :16] if tagged else np.zeros((N_GROUPS, 16), dtype=np.int64)
        hist = hist11 + draws[:, 16:] if tagged else draws
        sent_g = counts.sum(0)
        sent11_g = hist11.sum(-1)
        clicks = np.array([(hist[:, _PATTERN_HAS_D1]).sum(), (hist[:, _PATTERN_HAS_D2]).sum()])
        c = _counters_from_hist(hist, hist11, levels_a, levels_b, system.use_psi_plus, tagged, sent_g, sent11_g)
        return MCResult(c, clicks, n_pairs * period, hist, hist11, "iid")

    # sequential path ------------------------------------------------------
    if group is None:
        slot_group = rng.integers(N_GROUPS, size=n_pairs, dtype=np.int64).astype(np.int16)
    else:
        slot_group = np.repeat(group, sizes).astype(np.int16)
    slot_level = np.repeat(block_level, sizes).astype(np.int16)
    la, lb = np.asarray(levels_a), np.asarray(levels_b)
    raw = np.empty(n_pairs, dtype=np.uint8)
    is11 = np.zeros(n_pairs, dtype=bool)
    if tagged:
        n_max = int(max(poisson.ppf(1 - 1e-15, max(la.max(), lb.max())), 2))
        cdf = np.cumsum(fock_table(system, t_a, t_b, lam_levels, n_max, masked=False), axis=-1)
        cdf[..., -1] = 1.0
        cdf = cdf.reshape(-1, 16)
    else:
        cdf = np.cumsum(raw_group_patterns(system, levels_a, levels_b, t_a, t_b, lam_levels), axis=-1)
        cdf[..., -1] = 1.0
        cdf = cdf.reshape(-1, 16)
    for s in range(0, n_pairs, chunk):
        e = min(s + chunk, n_pairs)
        g = slot_group[s:e].astype(np.int64)
        lv = slot_level[s:e].astype(np.int64)
        if tagged:
            na = np.minimum(rng.poisson(la[GROUP_CELL_A[g]]), n_max)
            nb = np.minimum(rng.poisson(lb[GROUP_CELL_B[g]]), n_max)
            is11[s:e] = (na == 1) & (nb == 1)
            row = ((lv * N_COMBOS + GROUP_COMBO[g]) * (n_max + 1) + na) * (n_max + 1) + nb
        else:
            row = lv * N_GROUPS + g
        u = rng.random(e - s)
        raw[s:e] = (cdf[row] <= u[:, None]).sum(-1)
    ap = np.array([system.det1.afterpulse_per_bin] * 2 + [system.det2.afterpulse_per_bin] * 2)
    ap_raw = None
    if ap.any():
        ap_raw = np.empty(n_pairs, dtype=np.uint8)
        weights = 1 << np.arange(4)
        for s in range(0, n_pairs, chunk):
            e = min(s + chunk, n_pairs)
            ap_raw[s:e] = ((rng.random((e - s, 4)) < ap) * weights).sum(-1)
    span = (system.det1.afterpulse_span, system.det2.afterpulse_span)
    obs, clicks = kernels.apply_detector_dynamics(
        raw, period, system.mode_separation,
        (system.det1.recovery_time, system.det2.recovery_time), span, ap_raw, backend=backend)
    g64 = slot_group.astype(np.int64)
    hist = np.bincount(g64 * 16 + obs, minlength=N_GROUPS * 16).reshape(N_GROUPS, 16)
    hist11 = np.bincount(g64[is11] * 16 + obs[is11], minlength=N_GROUPS * 16).reshape(N_GROUPS, 16)
    sent_g = np.bincount(g64, minlength=N_GROUPS)
    sent11_g = np.bincount(g64[is11], minlength=N_GROUPS)
    c = _counters_from_hist(hist, hist11, levels_a, levels_b, system.use_psi_plus, tagged, sent_g, sent11_g)
    return MCResult(c, clicks, n_pairs * period, hist, hist11, "sequential")
