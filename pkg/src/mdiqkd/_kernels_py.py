"""Pure-Python detector-dynamics kernel (fallback for the compiled one)."""
from __future__ import annotations

import math

import numpy as np


def apply_detector_dynamics(raw, ap_raw, period, sep, recovery, span):
    """Mask raw click patterns with dead time and add afterpulses, slot by slot.

    Slots are ``period`` apart; within a slot the early bins of both detectors
    are processed before the late bins. A click opens a recovery window in
    which that detector sees nothing. Once a detector has clicked at least
    once, a candidate afterpulse in ``ap_raw`` becomes a real click if it falls
    within ``span`` after the recovery window ended.

    Args:
        raw: uint8 patterns (bit 0 D1e, 1 D1l, 2 D2e, 3 D2l), one per slot.
        ap_raw: uint8 afterpulse candidate patterns, same length as ``raw``,
            or empty to disable afterpulsing.
        period: slot spacing in seconds.
        sep: early-to-late bin separation in seconds.
        recovery: per-detector recovery time (2 floats).
        span: per-detector afterpulse window after recovery (2 floats, may be inf).

    Returns:
        (observed patterns, clicks per detector)
    """
    n = len(raw)
    use_ap = len(ap_raw) > 0
    if use_ap and len(ap_raw) != n:
        raise ValueError("ap_raw must be empty or match raw in length")
    out = np.zeros(n, dtype=np.uint8)
    dead_until = [-math.inf, -math.inf]
    clicked = [False, False]
    counts = [0, 0]
    raw_list = raw.tolist()
    ap_list = ap_raw.tolist() if use_ap else None
    for i in range(n):
        r = raw_list[i]
        a = ap_list[i] if use_ap else 0
        if r == 0 and a == 0:
            continue
        t0 = i * period
        o = 0
        for bin_ in (0, 1):
            tau = t0 + bin_ * sep
            for k in (0, 1):
                bit = 2 * k + bin_
                if tau < dead_until[k]:
                    continue
                click = (r >> bit) & 1
                if not click and clicked[k] and (a >> bit) & 1:
                    click = tau < dead_until[k] + span[k]
                if click:
                    o |= 1 << bit
                    dead_until[k] = tau + recovery[k]
                    clicked[k] = True
                    counts[k] += 1
        out[i] = o
    return out, np.array(counts, dtype=np.int64)
