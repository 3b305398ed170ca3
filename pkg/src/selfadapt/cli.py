"""Command line: ``selfadapt run`` for experiments, ``selfadapt trace`` to generate arrival traces."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigurationError, load_config
from .harness import Ablation, resolve_trace, run, write_report
from .sim import TraceParseError, constant_rate, piecewise, poisson, two_phase_burst

log = logging.getLogger("selfadapt")


def _run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except (OSError, ConfigurationError) as exc:
        print(f"selfadapt: invalid config: {exc}", file=sys.stderr)
        return 2
    if args.engine:
        cfg = replace(cfg, reasoner=replace(cfg.reasoner, engine=args.engine))
    try:
        trace = resolve_trace(args.trace)
    except (OSError, TraceParseError, ValueError) as exc:
        print(f"selfadapt: cannot load trace: {exc}", file=sys.stderr)
        return 2

    ablation = Ablation(
        meta=not args.no_meta,
        tools=not args.no_tools,
        fast=not args.no_fast,
        reasoner=not args.reactive_baseline,
        freeze_meta=args.freeze_meta,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bus_log = open(out / "bus.ndjson", "w") if args.record else None
    try:
        result = run(cfg, trace, ablation, seed=args.seed, record_to=bus_log, cycles=args.cycles)
    except Exception as exc:
        log.exception("run failed")
        print(f"selfadapt: run failed: {exc}", file=sys.stderr)
        return 1
    finally:
        if bus_log is not None:
            bus_log.close()

    write_report(result.report, out)
    if args.kb_dump:
        with open(out / "episodes.ndjson", "w") as fp:
            result.kernel.kb.dump(fp)
    rep = result.report
    print(
        f"{rep.label}: requests={rep.request_count} optional={rep.optional_pct:.2f}% late={rep.late_pct:.2f}% "
        f"servers={rep.avg_servers:.3f} utility={rep.total_utility:.2f} triggers={rep.reactive_triggers}"
    )
    return 0


def _phases(text: str) -> list[tuple[float, float]]:
    """Parse ``duration:rate,duration:rate,...``."""
    out = []
    for item in filter(None, (p.strip() for p in (text or "").split(","))):
        try:
            duration, rate = item.split(":")
            out.append((float(duration), float(rate)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad phase {item!r}; expected duration:rate") from None
    if not out:
        raise argparse.ArgumentTypeError("--phases is empty")
    return out


def _trace(args: argparse.Namespace) -> int:
    if args.kind == "constant":
        trace = constant_rate(args.rate, args.duration)
    elif args.kind == "poisson":
        trace = poisson(args.rate, args.duration, args.seed)
    elif args.kind == "phases":
        trace = piecewise(_phases(args.phases) * args.cycles, seed=args.seed)
    else:
        trace = two_phase_burst(
            args.rate,
            args.burst_rate,
            args.base_len,
            args.burst_len,
            args.cycles,
            seed=args.seed,
            ramp_len=args.ramp_len,
        )
    text = trace.to_text()
    if args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfadapt", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a trace through the framework and write CSV reports")
    r.add_argument("--config", default=None, help="YAML config (default: bundled defaults)")
    r.add_argument("--trace", required=True, help="gap file, or a bundled name: constant, bursty")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--no-meta", action="store_true")
    r.add_argument("--no-tools", action="store_true", help="inject standard evidence instead of agent tool calls")
    r.add_argument("--no-fast", action="store_true")
    r.add_argument("--reactive-baseline", action="store_true", help="fast controller only, no reasoner")
    r.add_argument("--engine", choices=("rules", "external"), default=None)
    r.add_argument("--record", action="store_true", help="write bus traffic to bus.ndjson")
    r.add_argument("--kb-dump", action="store_true", help="write the knowledge base to episodes.ndjson")
    r.add_argument("--freeze-meta", action="store_true", help="reflect but never evolve")
    r.add_argument("--cycles", type=int, default=None, help="stop after N monitor ticks")
    r.add_argument("--out", required=True)
    r.set_defaults(func=_run)

    t = sub.add_parser("trace", help="generate an arrival trace (inter-arrival gaps, one per line)")
    t.add_argument("kind", choices=("constant", "poisson", "burst", "phases"))
    t.add_argument("--rate", type=float, default=1.0, help="base arrivals per second")
    t.add_argument("--phases", default="", help="phases kind: duration:rate,... repeated --cycles times")
    t.add_argument("--duration", type=float, default=3600.0)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--burst-rate", type=float, default=0.0)
    t.add_argument("--base-len", type=float, default=540.0)
    t.add_argument("--burst-len", type=float, default=60.0)
    t.add_argument("--ramp-len", type=float, default=0.0)
    t.add_argument("--cycles", type=int, default=1, help="burst/phases repetitions")
    t.add_argument("-o", "--output", default="-")
    t.set_defaults(func=_trace)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "trace" and args.kind == "poisson" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        print(f"selfadapt: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
