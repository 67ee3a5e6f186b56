"""``capsweep`` command line: zones, set-cap, sweep, analyze, tune, simulate.

Exit codes: 0 success, 1 runtime error, 2 usage error. Every command that
writes to system files accepts ``--dry-run``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from capsweep import analysis, campaign, powercap_io, simcpu, tuner
from capsweep.errors import CapsweepError, PreconditionError, TuneAborted

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _cell(text: str) -> tuple[int, int]:
    try:
        cap, cores = text.lower().split("x")
        return int(cap), int(cores)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CAPxCORES such as 150x64, got {text!r}") from None


def _pct(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError("budget must be >= 0")
    return value / 100.0


def _dump(obj, fh=None) -> None:
    fh = fh or sys.stdout
    json.dump(obj, fh, indent=2, sort_keys=True)
    fh.write("\n")


def _sim_backend(config_path: str | None, spec_sim: dict | None = None) -> campaign.SimBackend:
    cfg = dict(spec_sim or {})
    if config_path:
        with open(config_path) as fh:
            cfg.update(json.load(fh))
    return campaign.SimBackend.from_config(cfg)


# -- commands ----------------------------------------------------------------


def cmd_zones(args) -> int:
    zones = powercap_io.parse_zone_tree(args.root)
    if args.format == "structured":
        _dump([powercap_io.zone_to_dict(z) for z in zones])
    elif not zones:
        print("no zones found")
    else:
        sys.stdout.write(powercap_io.format_zone_tree(zones))
    return EXIT_OK


def cmd_set_cap(args) -> int:
    zones = powercap_io.parse_zone_tree(args.root)
    report = powercap_io.set_power_limit_watts(zones, args.watts, dry_run=args.dry_run)
    prefix = "would write" if args.dry_run else "wrote"
    for path, value in report.writes:
        print(f"{prefix} {path} -> {value.strip()}")
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return EXIT_OK


def _real_backend(args, **kwargs) -> campaign.SysfsBackend:
    return campaign.SysfsBackend(args.powercap_root, args.cpu_root, rate_hz=args.rate, **kwargs)


def cmd_sweep(args) -> int:
    spec = campaign.load_campaign_spec(args.spec)
    if args.out:
        spec.output_dir = Path(args.out)
    if args.dry_run:
        done = {r.config.key for r in campaign.read_results(spec.results_path)}
        for p in spec.points():
            if p.key not in done:
                print(f"would run workload={p.workload} cap_w={p.cap_w} cores={p.cores} trial={p.trial}")
        return EXIT_OK
    if args.backend == "sim":
        backend = _sim_backend(args.sim_config, spec.sim)
    else:
        backend = _real_backend(args, trace_dir=spec.output_dir / "traces")
    results = campaign.run_grid(spec, backend)
    print(f"{len(results)} results in {spec.results_path}")
    failures = spec.output_dir / campaign.FAILURES_FILE
    if failures.exists():
        print(f"failed points logged in {failures}", file=sys.stderr)
    return EXIT_OK


def cmd_analyze(args) -> int:
    results = campaign.read_results(args.results)
    out = Path(args.out) if args.out else Path(args.results).parent
    out.mkdir(parents=True, exist_ok=True)
    workloads = [args.workload] if args.workload else sorted({r.config.workload for r in results})
    if not workloads:
        raise CapsweepError(f"no results in {args.results}")
    budgets = sorted({0.0, 0.05, 0.10, args.budget})
    summaries, stalls = [], []
    for wl in workloads:
        for metric in ("energy_rapl", "energy_supply", "runtime"):
            try:
                m = analysis.build_matrix(results, metric, args.baseline, workload=wl)
            except analysis.BaselineMissing:
                if metric == "energy_supply":
                    continue
                raise
            analysis.export_matrix_csv(m, out / f"{wl}_{metric}_matrix.csv")
        try:
            stalls.append(analysis.stall_range(results, workload=wl))
        except analysis.NoCycleData:
            pass
        summaries.append(analysis.summary_report(
            results, args.baseline, workload=wl, budgets=budgets, tdp_w=args.tdp, metric=args.metric
        ))
    if stalls:
        analysis.export_stall_csv(stalls, out / "stall_ratio.csv")
    report = {"requested_budget": args.budget, "workloads": summaries}
    analysis.write_summary(report, out / "summary.json")
    _dump(report)
    return EXIT_OK


def cmd_tune(args) -> int:
    if args.mode == "rule-of-thumb":
        _dump({"method": "rule_of_thumb", "tdp_w": args.tdp, "recommended_cap_w": tuner.rule_of_thumb_cap(args.tdp)})
        return EXIT_OK

    if args.spec:
        spec = campaign.load_campaign_spec(args.spec)
        if len(spec.workloads) != 1:
            raise PreconditionError("tune needs a spec with exactly one workload")
        workload = spec.workloads[0]
        sim_cfg = spec.sim
    else:
        if args.backend != "sim":
            raise PreconditionError("the real backend needs --spec to name the workload")
        workload = campaign.SimWorkload(args.workload, simcpu.preset(args.workload))
        sim_cfg = {}

    if args.dry_run:
        print(f"would tune {workload.name} over [{args.lo}, {args.hi}] W, tol {args.tol} W, "
              f"at most {tuner.max_gss_evaluations(args.lo, args.hi, args.tol)} search evaluations")
        return EXIT_OK

    backend = _sim_backend(args.sim_config, sim_cfg) if args.backend == "sim" else _real_backend(args)
    cores = args.cores or backend.max_cores
    metric = "energy_supply_j" if args.metric == "energy_supply" else "energy_rapl_j"

    def runner(cap: int) -> tuple[float, float]:
        r = backend.run_point(campaign.RunConfig(cap, cores, workload.name, workload_def=workload))
        if not r.ok:
            raise CapsweepError(f"workload exited with status {r.exit_status} at {cap} W")
        energy = getattr(r, metric)
        if energy is None:
            raise CapsweepError(f"{args.metric} not measured")
        return energy, r.runtime_s

    state = backend.snapshot()
    try:
        result = tuner.tune(
            runner, args.lo, args.hi, args.budget, args.reference,
            tol_w=args.tol, trials=args.trials, grid_fallback=not args.no_grid_fallback,
        )
    except TuneAborted as exc:
        print(f"tuning aborted: {exc.cause}", file=sys.stderr)
        _dump(exc.partial.to_dict(), sys.stderr)
        return EXIT_RUNTIME
    finally:
        backend.restore(state)
    payload = result.to_dict()
    payload["rule_of_thumb_cap_w"] = tuner.rule_of_thumb_cap(args.tdp)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result.write_csv(out / "tune_evaluations.csv")
        with open(out / "tune.json", "w") as fh:
            _dump(payload, fh)
    _dump(payload)
    return EXIT_OK


def cmd_simulate(args) -> int:
    backend = _sim_backend(args.sim_config)
    spec = simcpu.preset(args.workload)
    res = simcpu.simulate_run(
        backend.params, spec, args.cap, args.cores,
        dt_ms=backend.dt_ms, window_us=backend.window_us, hysteresis=backend.hysteresis,
    )
    out = {
        "workload": spec.name,
        "cap_w": args.cap,
        "cores": args.cores,
        "runtime_s": res.runtime_s,
        "energy_j": res.energy_j,
        "energy_supply_j": backend.supply.energy_j(res) if backend.supply else None,
        "socket_energy_j": list(res.socket_energy_j),
        "energy_per_work_j": simcpu.energy_per_work(res, spec),
        "mean_stall_ratio": res.mean_stall_ratio,
        "cap_violation": res.cap_violation,
    }
    if args.trace:
        from capsweep.telemetry import export_trace_csv

        trace = simcpu.to_trace(res, backend.params, args.rate, supply=backend.supply)
        base = Path(args.trace)
        base.mkdir(parents=True, exist_ok=True)
        export_trace_csv(trace, base / "freq.csv", base / "energy.csv")
    _dump(out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsweep", description="RAPL power-cap sweeps and tuning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    z = sub.add_parser("zones", help="show the powercap zone tree")
    z.add_argument("--root", help="powercap root (default $CAPSWEEP_POWERCAP_ROOT or sysfs)")
    z.add_argument("--format", choices=("text", "structured"), default="text")
    z.set_defaults(func=cmd_zones)

    s = sub.add_parser("set-cap", help="set long- and short-term limits on every package zone")
    s.add_argument("watts", type=_positive_int)
    s.add_argument("--root")
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(func=cmd_set_cap)

    def machine_flags(sp):
        sp.add_argument("--backend", choices=("real", "sim"), default="sim")
        sp.add_argument("--powercap-root")
        sp.add_argument("--cpu-root")
        sp.add_argument("--rate", type=float, default=10.0, help="sampling rate in Hz")
        sp.add_argument("--sim-config", help="JSON file of simulator settings")
        sp.add_argument("--dry-run", action="store_true")

    w = sub.add_parser("sweep", help="run a campaign grid")
    w.add_argument("--spec", required=True)
    w.add_argument("--out", help="output directory (overrides the spec)")
    machine_flags(w)
    w.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="normalised matrices and summary")
    a.add_argument("--results", required=True)
    a.add_argument("--baseline", type=_cell, default=campaign.DEFAULT_BASELINE)
    a.add_argument("--budget", type=_pct, default=0.05, help="runtime budget in percent")
    a.add_argument("--metric", choices=("energy_rapl", "energy_supply"), default="energy_rapl")
    a.add_argument("--workload")
    a.add_argument("--tdp", type=_positive_int, default=150)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("tune", help="find an energy-efficient cap")
    t.add_argument("--mode", choices=("search", "rule-of-thumb"), default="search")
    t.add_argument("--lo", type=_positive_int, default=70)
    t.add_argument("--hi", type=_positive_int, default=180)
    t.add_argument("--tol", type=_positive_int, default=5)
    t.add_argument("--budget", type=_pct, default=0.05, help="runtime budget in percent")
    t.add_argument("--reference", type=_positive_int, default=150)
    t.add_argument("--tdp", type=_positive_int, default=150)
    t.add_argument("--cores", type=_positive_int)
    t.add_argument("--trials", type=_positive_int, default=1)
    t.add_argument("--workload", choices=sorted(simcpu.PRESETS), default="compute_bound")
    t.add_argument("--spec", help="campaign spec naming the workload")
    t.add_argument("--metric", choices=("energy_rapl", "energy_supply"), default="energy_rapl")
    t.add_argument("--no-grid-fallback", action="store_true")
    t.add_argument("--out")
    machine_flags(t)
    t.set_defaults(func=cmd_tune)

    m = sub.add_parser("simulate", help="simulate one run")
    m.add_argument("--workload", choices=sorted(simcpu.PRESETS), default="compute_bound")
    m.add_argument("--cap", type=_positive_int, default=150)
    m.add_argument("--cores", type=_positive_int, default=64)
    m.add_argument("--sim-config")
    m.add_argument("--trace", help="directory for freq.csv / energy.csv")
    m.add_argument("--rate", type=float, default=10.0)
    m.set_defaults(func=cmd_simulate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PreconditionError as exc:
        print(f"capsweep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CapsweepError, OSError, ValueError, KeyError) as exc:
        print(f"capsweep: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
