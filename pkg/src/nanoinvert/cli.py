"""Command-line entry points: forward, synth, invert, summarize.

Exit status 0 on success, 1 for solver failures, 2 for configuration or
input errors and 3 when a chain cannot start.  ``NANOINVERT_LOG`` sets the
log level (default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .bayes import StartupError
from .config import Config, ConfigError, load, snapshot
from .diagnostics import DEFAULT_BINS, summarize
from .files import (read_chain, read_measurements, write_chain, write_iv, write_json,
                    write_measurements)
from .inversion import ForwardError, forward_iv, run_inversion, synthesize_measurements

log = logging.getLogger("nanoinvert")

EXIT_SOLVER = 1
EXIT_CONFIG = 2
EXIT_STARTUP = 3
FORWARD_TOLERANCE = 1.0e-9  # V


class _Timer:
    def __init__(self):
        self.phases = {}

    def __call__(self, name):
        timer = self

        class _Phase:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = time.perf_counter() - self.t0

        return _Phase()


def _configure_logging():
    level = os.environ.get("NANOINVERT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _load_config(args) -> Config:
    cfg = load(args.config) if args.config else Config()
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("bad value for --threads: must be at least 1")
        run = replace(run, threads=args.threads)
    return replace(cfg, run=run)


def _manifest(args, cfg: Config | None, command, outputs, timer, extra=None) -> Path:
    out_dir = Path(args.out_dir)
    data = {
        "command": command,
        "artifact_version": __version__,
        "seed": cfg.run.seed if cfg is not None else None,
        "config": snapshot(cfg) if cfg is not None else None,
        "outputs": sorted(Path(p).name for p in outputs),
    }
    if extra:
        data.update(extra)
    if cfg is not None and cfg.run.timings:
        data["timings_s"] = timer.phases
    return write_json(out_dir / f"manifest_{command}.json", data)


def _single_sweep_model(cfg: Config):
    # one-off sweeps are cheap enough to solve to the tight default tolerance
    model = cfg.forward_model()
    model.tolerance = min(model.tolerance, FORWARD_TOLERANCE)
    return model


def cmd_forward(args) -> int:
    cfg = _load_config(args)
    timer = _Timer()
    with timer("forward"):
        currents = forward_iv(cfg.parameters, cfg.gate_voltages, _single_sweep_model(cfg))
    out = write_iv(Path(args.out_dir) / "iv.csv", cfg.gate_voltages, currents)
    _manifest(args, cfg, "forward", [out], timer)
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    timer = _Timer()
    with timer("synth"):
        data = synthesize_measurements(cfg.truth(), cfg.gate_voltages, cfg.epsilon,
                                       cfg.run.seed, _single_sweep_model(cfg))
    outs = write_measurements(Path(args.out_dir) / "measurements.csv", data)
    _manifest(args, cfg, "synth", outs, timer)
    return 0


def cmd_invert(args) -> int:
    cfg = _load_config(args)
    try:
        data = read_measurements(args.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"bad measurement file {args.data}: {exc}") from exc
    timer = _Timer()
    model = cfg.forward_model()
    every = max(1, cfg.study.n_steps // 20)

    def progress(k, n, res):
        if k % every == 0:
            log.info("step %d/%d", k, n)

    with timer("invert"):
        chain, summary = run_inversion(cfg.study, data, model, seed=cfg.run.seed,
                                       progress=progress)
    out_dir = Path(args.out_dir)
    outs = write_chain(out_dir / "chain.csv", chain)
    outs.append(write_json(out_dir / "summary.json", summary.to_dict()))
    _manifest(args, cfg, "invert", outs, timer, {"data": Path(args.data).name})
    return 0


def cmd_summarize(args) -> int:
    try:
        chain = read_chain(args.chain)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"bad chain file {args.chain}: {exc}") from exc
    cfg = _load_config(args) if args.config else None
    burn = args.burn_in if args.burn_in is not None else (cfg.study.burn_in if cfg else 0.2)
    bins = args.bins if args.bins is not None else (cfg.study.bins if cfg else DEFAULT_BINS)
    timer = _Timer()
    try:
        with timer("summarize"):
            summary = summarize(chain, burn, bins)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = write_json(Path(args.out_dir) / "summary.json", summary.to_dict())
    _manifest(args, cfg, "summarize", [out], timer,
              {"chain": Path(args.chain).name, "burn_in": burn, "bins": bins})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out-dir", default=".", help="directory for output files")
    common.add_argument("--threads", type=int, help="concurrent gate-point solves")
    parser = argparse.ArgumentParser(prog="nanoinvert", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("forward", parents=[common], help="I-V sweep at the configured parameters")
    sub.add_parser("synth", parents=[common], help="synthetic noisy measurements")
    p = sub.add_parser("invert", parents=[common], help="DRAM posterior sampling")
    p.add_argument("--data", required=True, help="measurement CSV (with JSON sidecar)")
    p = sub.add_parser("summarize", parents=[common], help="posterior summary of a chain")
    p.add_argument("--chain", required=True, help="chain CSV")
    p.add_argument("--burn-in", type=float, help="fraction of records discarded")
    p.add_argument("--bins", type=int, help="histogram bins")
    return parser


_COMMANDS = {"forward": cmd_forward, "synth": cmd_synth, "invert": cmd_invert,
             "summarize": cmd_summarize}


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"nanoinvert: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StartupError as exc:
        print(f"nanoinvert: cannot start chain: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    except ForwardError as exc:
        print(f"nanoinvert: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"nanoinvert: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
