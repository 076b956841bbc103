"""Command-line interface: ``mdiqkd simulate | optimize | drift-demo``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import runner


def _loss_list(text: str) -> tuple[float, ...]:
    """Parse ``"16,40,60"`` or ``"10:60:5"`` (start:stop:step, inclusive)."""
    text = text.strip()
    if not text:
        raise argparse.ArgumentTypeError("empty loss list")
    if ":" in text:
        try:
            start, stop, step = (float(x) for x in text.split(":"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad range {text!r}; use start:stop:step") from None
        if step <= 0:
            raise argparse.ArgumentTypeError("step must be positive")
        vals, x = [], start
        while x <= stop + 1e-9:
            vals.append(round(x, 10))
            x += step
        return tuple(vals)
    try:
        return tuple(float(x) for x in text.replace(" ", ",").split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad loss list {text!r}") from None


def _resolve_config(choice: list[str]) -> runner.RunConfig:
    if len(choice) == 2 and choice[0] == "preset":
        return runner.preset(int(choice[1]))
    if len(choice) == 1:
        if choice[0].isdigit():
            return runner.preset(int(choice[0]))
        return runner.load_config(choice[0])
    raise argparse.ArgumentTypeError("--config takes a file path or 'preset N'")


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args.config)
    updates = {}
    if args.sweep is not None:
        updates["losses"] = args.sweep
    if args.mode is not None:
        updates["mode"] = args.mode
    if args.pairs is not None:
        updates["pairs"] = args.pairs
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.workers is not None:
        updates["workers"] = args.workers
    if args.qubit_rate is not None:
        updates["qubit_rate"] = args.qubit_rate
        updates["rate_anchors"] = None
    if args.intensities is not None:
        updates["intensities"] = tuple(args.intensities)
    cfg = replace(cfg, **updates)
    rows = runner.sweep(cfg, out=args.out)
    if args.out is None:
        from .postprocess import write_csv
        write_csv(rows, sys.stdout)
    return 0


def cmd_optimize(args) -> int:
    cfg = runner.preset(args.preset)
    if args.qubit_rate is not None:
        cfg = replace(cfg, qubit_rate=args.qubit_rate, rate_anchors=None)
    res = runner.optimize_point(cfg, args.loss)
    rate = runner.emission_rate(cfg, args.loss)
    from .postprocess import bits_per_second
    print(f"config {cfg.config_id} at {args.loss:g} dB")
    print(f"mu = {res.mu:.4f}  sigma = {res.sigma:.4f}  nu = {res.nu:.4f}")
    print(f"S_per_gate = {res.rate:.6e}{'  (zero key)' if res.zero_key else ''}")
    print(f"S_per_sec (before dead-time factor) = {bits_per_second(res.rate, rate, cfg.feedback.duty):.6g}")
    print(f"evaluations = {res.evaluations}")
    return 0


def cmd_drift_demo(args) -> int:
    runner.drift_demo(args.preset, duration=args.duration, dt=args.dt, seed=args.seed,
                      every=args.every, out=args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdiqkd", description="Decoy-state MDI-QKD simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="sweep channel loss and write a CSV of key rates")
    s.add_argument("--config", nargs="+", required=True, metavar="FILE|preset N")
    s.add_argument("--sweep", type=_loss_list, help="loss points in dB, e.g. 16,40,60 or 10:60:5")
    s.add_argument("--mode", choices=runner.MODES)
    s.add_argument("--pairs", type=int, help="emitted pairs per loss point (Monte Carlo)")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--qubit-rate", type=float, help="fixed qubit generation rate in Hz")
    s.add_argument("--intensities", type=float, nargs=3, metavar=("MU", "SIGMA", "NU"))
    s.add_argument("--out", help="CSV path (stdout if omitted)")
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("optimize", help="optimise signal and decoy intensities at one loss")
    o.add_argument("--preset", type=int, required=True)
    o.add_argument("--loss", type=float, required=True)
    o.add_argument("--qubit-rate", type=float)
    o.set_defaults(func=cmd_optimize)

    d = sub.add_parser("drift-demo", help="write a drift time series with and without feedback")
    d.add_argument("--preset", default="fig3")
    d.add_argument("--out", required=True)
    d.add_argument("--duration", type=float, default=3 * 3600.0)
    d.add_argument("--dt", type=float, default=1.0)
    d.add_argument("--every", type=int, default=10, help="keep every n-th sample")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_drift_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
