"""Command-line front end: ``odmr-rig run|demo-drift|protocols``.

Exit codes: 0 success, 2 configuration error, 3 simulation error,
4 fit did not converge (artifacts are still written).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .acquisition import (PROTOCOLS, AcquisitionError, ZeroReferenceError, drift_comparison, protocol_builder,
                          repolarization_trace, run_sweep, serial_reference_sweep)
from .analysis import FITTERS, FitError, FitReport
from .config import SERIAL, ConfigError, RunConfig, load_config, template, with_overrides
from .instruments import InstrumentError
from .pulse_seq import SequenceError

logger = logging.getLogger("odmr_rig")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_FIT = 4
OUTPUT_ENV = "ODMR_RIG_OUTPUT"


def _output_dir(cfg: RunConfig, label: str) -> Path:
    # protocol name plus config digest keeps artifacts of different configs apart
    out = Path(cfg.output.directory) / f"{label}-{cfg.digest()}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _failed_report(model_id: str, message: str, n_points: int) -> FitReport:
    return FitReport(model_id, {}, {}, float("nan"), 0, False, {}, message, n_points=n_points)


def cmd_run(cfg: RunConfig) -> int:
    p = cfg.protocol
    spec = PROTOCOLS[p.kind]
    out = _output_dir(cfg, p.kind)
    settings = cfg.settings
    if p.kind == "repolarization":
        trace = repolarization_trace(settings, p.seed, sample_rate=cfg.apd.sample_rate)
        trace.to_csv(out / "trace.csv")
        try:
            report = FITTERS[spec.model_id](trace.times, trace.samples)
        except FitError as exc:
            report = _failed_report(spec.model_id, str(exc), len(trace.samples))
    else:
        builder = protocol_builder(p.kind, **cfg.builder_params)
        values = cfg.sweep_values
        keep = cfg.output.emit_waveforms
        if p.strategy == SERIAL:
            result = serial_reference_sweep(builder, values, settings, p.seed, workers=p.workers, shuffle=p.shuffle,
                                            keep_waveforms=keep, protocol_name=p.kind)
        else:
            result = run_sweep(builder, values, p.strategy, settings, p.seed, workers=p.workers, shuffle=p.shuffle,
                               keep_waveforms=keep, protocol_name=p.kind)
        result.config_hash = cfg.digest()
        try:
            report = FITTERS[spec.model_id](result.swept_values, result.contrast_percent)
        except FitError as exc:
            report = _failed_report(spec.model_id, str(exc), len(values))
        result.metadata["swept_symbol"] = spec.swept_symbol
        for line in report.metadata_lines():
            key, _, value = line.partition(": ")
            result.metadata[key] = value
        result.to_csv(out / "sweep.csv")
        for i, wave in enumerate(result.waveforms):
            wave.to_csv(out / f"waveform_{i}.csv")
    (out / "fit_report.txt").write_text(report.to_text())
    print(f"wrote {out}")
    print(report.to_text(), end="")
    return EXIT_OK if report.converged else EXIT_FIT


def cmd_demo_drift(cfg: RunConfig) -> int:
    p = cfg.protocol
    if p.kind == "rabi":
        values = cfg.sweep_values
    else:
        start, stop, points = PROTOCOLS["rabi"].sweep
        values = np.linspace(start, stop, points)
    comp = drift_comparison(cfg.settings, values, p.seed, workers=p.workers)
    for sweep in comp.sweeps.values():
        sweep.config_hash = cfg.digest()
    out = _output_dir(cfg, "demo-drift")
    comp.to_csv(out / "drift_comparison.csv")
    (out / "drift_summary.txt").write_text(comp.summary())
    print(f"wrote {out}")
    print(comp.summary(), end="")
    return EXIT_OK


def cmd_protocols(kind: str | None = None) -> int:
    if kind is not None:
        print(template(kind), end="")
        return EXIT_OK
    for spec in PROTOCOLS.values():
        start, stop, points = spec.sweep
        print(f"{spec.name:15s} {spec.swept_symbol:7s} {spec.default_strategy.value:20s} "
              f"{start:g}..{stop:g} s x {points}  model={spec.model_id}  {spec.description}")
    print("\nstrategies: max_polarized, partial_depolarized, serial")
    print("config template (odmr-rig protocols --template <name> for another protocol):\n")
    print(template("rabi"), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odmr-rig", description="Pulsed ODMR rig simulator and fitter.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run the protocol named in the config and fit it"),
                       ("demo-drift", "compare referencing strategies on a drifting Rabi sweep")):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("config", help="INI config file")
        cmd.add_argument("--seed", type=int, help="override protocol.seed")
        cmd.add_argument("--output", help=f"override the output directory (also ${OUTPUT_ENV})")
    cmd = sub.add_parser("protocols", help="list protocols and print a config template")
    cmd.add_argument("--template", metavar="NAME", choices=list(PROTOCOLS), help="print only this template")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "protocols":
        return cmd_protocols(args.template)
    try:
        cfg = load_config(args.config)
        cfg = with_overrides(cfg, args.seed, args.output or os.environ.get(OUTPUT_ENV))
        if args.command == "run":
            return cmd_run(cfg)
        return cmd_demo_drift(cfg)
    except (ConfigError, SequenceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InstrumentError, AcquisitionError, ZeroReferenceError, FloatingPointError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
