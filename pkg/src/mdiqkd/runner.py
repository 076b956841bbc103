"""Experiment orchestration: configuration presets, loss sweeps and CSV output."""
from __future__ import annotations

import dataclasses
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import engine
from .bsm import DetectorModel, detector
from .channel import STATIC, DriftModel, drift_model, split_link
from .engine import System
from .feedback import FeedbackConfig, Timeline, simulate_timeline, static_state
from .bsm import mode_overlap
from .postprocess import (
    DEFAULT_F,
    IntensityBounds,
    OptimizationResult,
    bits_per_second,
    key_rate_from_counters,
    key_rate_stderr,
    optimize_intensities,
    report_rate,
    write_csv,
)
from .qubit_prep import STATE_PRESETS, StateParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

DB_PER_KM = 0.2
MODES = ("analytic", "mc")

# Slot rates per detector family (Hz). SNSPD rates are anchored at 20 MHz for
# 16 dB and 250 MHz for 40 dB and interpolated geometrically in between.
SNSPD_RATE_ANCHORS = ((16.0, 20e6), (40.0, 250e6))


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one sweep.

    ``intensities`` fixes ``(mu, sigma, nu)``; ``None`` optimises them per
    loss point with the analytic model. ``rate_anchors`` (loss dB, Hz) pairs
    override ``qubit_rate`` with a geometric interpolation in loss.
    """

    config_id: str = "custom"
    losses: tuple[float, ...] = (16.0,)
    qubit_rate: float = 20e6
    rate_anchors: tuple[tuple[float, float], ...] | None = None
    mode: str = "analytic"
    pairs: int = 10_000_000
    seed: int = 0
    state_a: StateParams = STATE_PRESETS["awg"]
    state_b: StateParams = STATE_PRESETS["awg"]
    detector: DetectorModel = detector("snspd")
    lasers: int = 1
    pm2: bool = True
    drift: DriftModel = STATIC
    feedback: FeedbackConfig = FeedbackConfig(lasers=1)
    intensities: tuple[float, float, float] | None = None
    intensity_bounds: IntensityBounds = IntensityBounds()
    f: float = DEFAULT_F
    use_psi_plus: bool = False
    alice_share: float = 0.5
    schedule: str = "random"
    block_size: int = 10_000
    drift_duration: float = 3600.0
    drift_dt: float = 1.0
    overlap_levels: int = 16
    timelines: int = 1
    workers: int = 1
    out: str | None = None
    link_lengths: tuple[tuple[float, float], ...] = ()  # (loss dB, km) of real fibre links

    def __post_init__(self):
        if any(x < 0 for x in self.losses):
            raise ValueError("loss points must be non-negative")
        if self.pairs <= 0 or self.timelines <= 0:
            raise ValueError("pairs and timelines must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lasers not in (1, 2):
            raise ValueError("lasers must be 1 or 2")
        if self.qubit_rate <= 0:
            raise ValueError("qubit_rate must be positive")

    @property
    def phase_randomized(self) -> bool:
        """Two free-running lasers or a phase modulator both randomise the relative phase."""
        return self.pm2 or self.lasers == 2

    @property
    def drifting(self) -> bool:
        return self.drift != STATIC

    def distance_km(self, loss_db: float) -> float:
        """Fibre length of a listed link, else the standard-fibre equivalent of the loss."""
        for loss, km in self.link_lengths:
            if math.isclose(loss, loss_db, abs_tol=1e-9):
                return km
        return loss_db / DB_PER_KM


def preset(config_id: int) -> RunConfig:
    """Hardware configurations 1-5."""
    try:
        cid = int(config_id)
    except (TypeError, ValueError):
        raise ValueError(f"unknown configuration {config_id!r}") from None
    awg, sg = STATE_PRESETS["awg"], STATE_PRESETS["sg"]
    common = dict(config_id=str(cid), state_a=awg, state_b=awg)
    if cid == 1:
        return RunConfig(**common, detector=detector("id201"), lasers=2, pm2=False,
                         drift=drift_model("fig3"), losses=(9.0,), qubit_rate=2e6,
                         feedback=FeedbackConfig(lasers=2), link_lengths=((9.0, 18.6),))
    if cid == 2:
        return RunConfig(**common, detector=detector("id201"), lasers=2, pm2=False,
                         losses=(9.1, 13.7, 18.2), qubit_rate=2e6, feedback=FeedbackConfig(lasers=2),
                         link_lengths=((9.1, 20.0), (13.7, 40.0), (18.2, 60.0)))
    if cid == 3:
        return RunConfig(**common, detector=detector("id210"), lasers=1, pm2=True,
                         losses=(13.7, 20.0), qubit_rate=25e6,
                         link_lengths=((13.7, 60.0), (20.0, 100.0)))
    if cid == 4:
        return RunConfig(**common, detector=detector("snspd"), lasers=1, pm2=True,
                         losses=(16.0, 40.0, 60.0), qubit_rate=20e6, rate_anchors=SNSPD_RATE_ANCHORS)
    if cid == 5:
        return RunConfig(config_id="5", state_a=sg, state_b=sg, detector=detector("snspd"), lasers=1,
                         pm2=True, losses=(16.0,), qubit_rate=20e6, rate_anchors=SNSPD_RATE_ANCHORS)
    raise ValueError(f"unknown configuration {config_id!r}; presets are 1-5")


# ----------------------------------------------------------------------------
# Configuration files


def _state(choice) -> StateParams:
    if isinstance(choice, str):
        try:
            return STATE_PRESETS[choice]
        except KeyError:
            raise ValueError(f"unknown state preset {choice!r}") from None
    data = dict(choice)
    base = _state(data.pop("preset", "ideal"))
    return StateParams.from_mapping(data, base)


def config_from_mapping(data: dict) -> RunConfig:
    """Build a configuration from a parsed TOML document.

    Top-level keys mirror :class:`RunConfig`; ``preset`` selects a base
    configuration. Tables ``[source]`` (``preset`` or StateParams fields,
    optionally split into ``[source.alice]``/``[source.bob]``), ``[detector]``,
    ``[drift]``, ``[feedback]``, ``[intensities]`` and ``[bounds]`` override
    the corresponding parts.
    """
    data = dict(data)
    cfg = preset(data.pop("preset")) if "preset" in data else RunConfig()
    updates = {}
    if "source" in data:
        src = dict(data.pop("source"))
        alice = src.pop("alice", None)
        bob = src.pop("bob", None)
        base = _state(src) if src else None
        updates["state_a"] = _state(alice) if alice is not None else (base or cfg.state_a)
        updates["state_b"] = _state(bob) if bob is not None else (base or cfg.state_b)
    if "detector" in data:
        choice = data.pop("detector")
        if isinstance(choice, dict) and "preset" not in choice:
            choice = {"preset": cfg.detector.name, **choice} if cfg.detector.name != "custom" else choice
        updates["detector"] = detector(choice)
    if "drift" in data:
        updates["drift"] = drift_model(data.pop("drift"))
    lasers = int(data.get("lasers", cfg.lasers))
    if "feedback" in data:
        fb = dict(data.pop("feedback"))
        updates["feedback"] = replace(FeedbackConfig(lasers=lasers), **fb)
    elif "lasers" in data:
        updates["feedback"] = replace(cfg.feedback, lasers=lasers)
    if "intensities" in data:
        it = data.pop("intensities")
        updates["intensities"] = (float(it["mu"]), float(it["sigma"]), float(it["nu"]))
    if "bounds" in data:
        b = data.pop("bounds")
        updates["intensity_bounds"] = IntensityBounds(**{k: tuple(v) if isinstance(v, list) else v
                                                         for k, v in b.items()})
    if "losses" in data:
        updates["losses"] = tuple(float(x) for x in data.pop("losses"))
    if "rate_anchors" in data:
        updates["rate_anchors"] = tuple(tuple(map(float, x)) for x in data.pop("rate_anchors"))
    if "link_lengths" in data:
        updates["link_lengths"] = tuple(tuple(map(float, x)) for x in data.pop("link_lengths"))
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown configuration key(s): {sorted(unknown)}")
    for key, value in data.items():
        updates[key] = str(value) if key == "config_id" else value
    return replace(cfg, **updates)


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return config_from_mapping(tomllib.load(fh))


# ----------------------------------------------------------------------------
# Building blocks


def build_system(cfg: RunConfig) -> System:
    return System(cfg.state_a, cfg.state_b, cfg.detector, cfg.detector,
                  phase_randomized=cfg.phase_randomized, use_psi_plus=cfg.use_psi_plus, f=cfg.f)


def emission_rate(cfg: RunConfig, loss_db: float) -> float:
    """Qubit generation rate at this loss, clamped to the detector gate rate."""
    rate = cfg.qubit_rate
    if cfg.rate_anchors:
        (l0, r0), (l1, r1) = cfg.rate_anchors[0], cfg.rate_anchors[-1]
        if loss_db <= l0:
            rate = r0
        elif loss_db >= l1:
            rate = r1
        else:
            x = (loss_db - l0) / (l1 - l0)
            rate = r0 * (r1 / r0) ** x
    gate = cfg.detector.gate_rate
    return min(rate, gate) if gate else rate


def _seed(cfg: RunConfig, point_index: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(point_index, stream))
    return np.random.default_rng(ss)


def drift_timeline(cfg: RunConfig, point_index: int = 0, feedback: FeedbackConfig | None = None) -> Timeline:
    fb = cfg.feedback if feedback is None else feedback
    return simulate_timeline(cfg.drift, fb, cfg.drift_duration, cfg.drift_dt,
                             _seed(cfg, point_index, 0), cfg.detector,
                             mode_width_fwhm=cfg.state_a.mode_width_fwhm)


def overlap_trace(cfg: RunConfig, point_index: int = 0) -> np.ndarray:
    """Mode overlap over the acquisition (one value for a static channel)."""
    if not cfg.drifting:
        st = static_state(cfg.feedback)
        lam = mode_overlap(st.delta_arrival, st.freq_diff, st.pol_overlap, cfg.state_a.mode_width_fwhm)
        return np.array([lam])
    return drift_timeline(cfg, point_index).overlap(cfg.state_a.mode_width_fwhm)


def _analytic_rate(system, t_a, t_b, lam_levels, weights, slot_rate):
    def evaluate(mu, sigma, nu):
        la, lb = engine.ladders(mu, sigma, nu)
        res = engine.analytic_point(system, la, lb, t_a, t_b, lam_levels, weights, slot_rate)
        return key_rate_from_counters(res.counters, system.f)[0]
    return evaluate


def optimize_point(cfg: RunConfig, loss_db: float, point_index: int = 0, lam=None) -> OptimizationResult:
    """Analytic intensity optimisation at one loss point."""
    system = build_system(cfg)
    t_a, t_b = _transmittances(cfg, loss_db)
    lam = overlap_trace(cfg, point_index) if lam is None else np.atleast_1d(lam)
    levels, weights, _ = engine.compress_levels(lam, cfg.overlap_levels)
    evaluate = _analytic_rate(system, t_a, t_b, levels, weights, emission_rate(cfg, loss_db))
    symmetric = cfg.state_a == cfg.state_b and math.isclose(cfg.alice_share, 0.5)
    return optimize_intensities(evaluate, cfg.intensity_bounds, symmetric=symmetric)


def _transmittances(cfg: RunConfig, loss_db: float) -> tuple[float, float]:
    from .channel import transmittance
    arm_a, arm_b = split_link(loss_db, cfg.alice_share)
    return transmittance(arm_a), transmittance(arm_b)


# ----------------------------------------------------------------------------
# Running


def run_point(cfg: RunConfig, loss_db: float, point_index: int = 0) -> dict:
    """Simulate one loss point and return its CSV row."""
    try:
        return _run_point(cfg, loss_db, point_index)
    except Exception as exc:
        raise RuntimeError(f"loss point {point_index} ({loss_db} dB) failed: {exc}") from exc


def _run_point(cfg: RunConfig, loss_db: float, point_index: int) -> dict:
    system = build_system(cfg)
    t_a, t_b = _transmittances(cfg, loss_db)
    rate = emission_rate(cfg, loss_db)
    lam = overlap_trace(cfg, point_index)
    levels, weights, _ = engine.compress_levels(lam, cfg.overlap_levels)
    if cfg.intensities is None:
        symmetric = cfg.state_a == cfg.state_b and math.isclose(cfg.alice_share, 0.5)
        opt = optimize_intensities(_analytic_rate(system, t_a, t_b, levels, weights, rate),
                                   cfg.intensity_bounds, symmetric=symmetric)
        mu, sigma, nu = opt.point
    else:
        mu, sigma, nu = cfg.intensities
    la, lb = engine.ladders(mu, sigma, nu)
    duty = cfg.feedback.duty

    if cfg.mode == "analytic":
        res = engine.analytic_point(system, la, lb, t_a, t_b, levels, weights, rate)
        counters, dtf = res.counters, res.dead_time_factor
        err_s = math.nan
    else:
        counters = None
        per = [cfg.pairs // cfg.timelines + (1 if i < cfg.pairs % cfg.timelines else 0)
               for i in range(cfg.timelines)]
        for i, n in enumerate(per):
            if n == 0:
                continue
            mc = engine.simulate_mc(system, la, lb, t_a, t_b, n, _seed(cfg, point_index, i + 1),
                                    slot_rate=rate, lam_trace=lam, max_levels=cfg.overlap_levels,
                                    schedule=cfg.schedule, block_size=cfg.block_size)
            counters = mc.counters if counters is None else counters.merge(mc.counters)
        dtf = 1.0  # dead time is already inside the simulated gains
        err_s = key_rate_stderr(counters, cfg.f)

    raw, bounds = key_rate_from_counters(counters, cfg.f)
    gain = counters.gain()
    qber = counters.error_rate()
    return {
        "loss_db": float(loss_db),
        "config_id": cfg.config_id,
        "basis": "Z",
        "mu": mu,
        "sigma": sigma,
        "nu": nu,
        "Q_z": gain[0, 0, 0],
        "e_z": qber[0, 0, 0],
        "Q_x": gain[1, 0, 0],
        "e_x": qber[1, 0, 0],
        "Q11_lower": bounds.q11_z_lower,
        "e11_upper": bounds.e11_x_upper,
        "Q11_true": counters.q11_true(),
        "e11_true": counters.e11_true(),
        "S_per_gate": report_rate(raw),
        "S_per_sec": bits_per_second(raw, rate, duty, dtf),
        "err_S": err_s,
        "distance_km": cfg.distance_km(loss_db),
        "S_per_gate_raw": raw,
    }


def _point_job(args):
    cfg, loss, idx = args
    return run_point(cfg, loss, idx)


def sweep(cfg: RunConfig, out=None) -> list[dict]:
    """Run every loss point (ascending) and optionally write the CSV."""
    if not cfg.losses:
        raise ValueError("sweep needs at least one loss point")
    losses = sorted(cfg.losses)
    jobs = [(cfg, loss, i) for i, loss in enumerate(losses)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_point_job, jobs))
    else:
        rows = [_point_job(j) for j in jobs]
    out = out if out is not None else cfg.out
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(rows, out)
    return rows


def cutoff_loss(cfg: RunConfig, lo: float, hi: float, tol: float = 0.1) -> float:
    """Largest loss with a positive optimised analytic key rate (bisection).

    ``lo`` must give a positive rate and ``hi`` a zero rate.
    """
    if not optimize_point(cfg, lo).rate > 0:
        raise ValueError(f"no key at the lower bracket {lo} dB")
    if optimize_point(cfg, hi).rate > 0:
        raise ValueError(f"key still positive at the upper bracket {hi} dB")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if optimize_point(cfg, mid).rate > 0:
            lo = mid
        else:
            hi = mid
    return lo


def key_rate_timeseries(cfg: RunConfig, loss_db: float, timeline: Timeline, window: float,
                        intensities: tuple[float, float, float], levels_per_window: int = 4):
    """Analytic key rate per gate in consecutive windows of a timeline.

    Returns ``(window_end_times, raw_rates)``.
    """
    system = build_system(cfg)
    t_a, t_b = _transmittances(cfg, loss_db)
    lam = timeline.overlap(cfg.state_a.mode_width_fwhm)
    per = max(1, int(round(window / cfg.drift_dt)))
    n_win = len(lam) // per
    if n_win == 0:
        raise ValueError("window longer than the timeline")
    la, lb = engine.ladders(*intensities)
    lv, wt = [], []
    for k in range(n_win):
        levels, weights, _ = engine.compress_levels(lam[k * per:(k + 1) * per], levels_per_window)
        lv.append(levels)
        wt.append(weights)
    flat = np.concatenate(lv)
    tables = engine.expected_tables(system, la, lb, t_a, t_b, flat, with_truth=False)
    rates = []
    pos = 0
    for levels, weights in zip(lv, wt):
        sub = engine.ExpectedTables(tables.levels_a, tables.levels_b,
                                    tables.proj[pos:pos + len(levels)], tables.err[pos:pos + len(levels)],
                                    tables.sent11, tables.proj11[pos:pos + len(levels)],
                                    tables.err11[pos:pos + len(levels)], tagged=False)
        rates.append(key_rate_from_counters(sub.counters(weights), cfg.f)[0])
        pos += len(levels)
    ends = timeline.time[per - 1::per][:n_win]
    return ends, np.array(rates)


DRIFT_COLUMNS = ("time_s", "temperature_c", "delta_arrival_ns", "pol_overlap", "freq_diff_mhz",
                 "overlap", "overlap_stabilized")


def drift_demo(drift="fig3", duration: float = 3 * 3600.0, dt: float = 1.0, seed: int = 0,
               every: int = 10, out=None, lasers: int = 2, det: DetectorModel | None = None) -> list[dict]:
    """Free-running drift with the resulting overlap, next to the stabilised overlap."""
    model = drift_model(drift)
    det = det or detector("id201")
    width = STATE_PRESETS["awg"].mode_width_fwhm
    ss = np.random.SeedSequence(seed)
    rng_free, rng_fb = (np.random.default_rng(s) for s in ss.spawn(2))
    free = simulate_timeline(model, FeedbackConfig.disabled(lasers), duration, dt, rng_free, det, width)
    stab = simulate_timeline(model, FeedbackConfig(lasers=lasers), duration, dt, rng_fb, det, width)
    stab_lam = stab.overlap(width)
    rows = []
    for i, row in enumerate(free.rows(width)):
        if i % every:
            continue
        row["overlap_stabilized"] = stab_lam[i]
        rows.append(row)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(rows, out, DRIFT_COLUMNS)
    return rows
