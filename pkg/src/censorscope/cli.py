"""Command line entry point.

Stages hand off through files: ``probe`` writes report records, ``detect``
turns them into verdicts, ``aggregate`` turns verdicts into plot tables. The
controller commands (``serve``, ``register``, ``submit``, ``schedule``,
``list``, ``export``) work on a data directory, taken from ``--data-dir`` or the
``CENSORSCOPE_DATA`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import date, datetime
from pathlib import Path
from typing import Optional, Sequence

from . import aggregate, detectors, netsim
from .agent import ProbeAgent
from .controller import ControllerError, ControllerStore, ExperimentSpec, Selector, make_server
from .fingerprints import load_fingerprints
from .model import (
    Mode,
    Origin,
    ReportParseError,
    ValidationError,
    VantagePoint,
    deserialize_verdict,
    parse_test_list,
    parse_ts,
    read_lines,
    read_record,
    serialize_report,
    serialize_verdict,
    vantage_from_dict,
)
from .transport import RecordedTransport, RecordingTransport, SimTransport

log = logging.getLogger("censorscope")

DATA_ENV = "CENSORSCOPE_DATA"
DEFAULT_DATA_DIR = "censorscope-data"


class CliError(Exception):
    """Operational failure; reported on stderr with exit status 1."""


def _data_dir(args) -> Path:
    return Path(args.data_dir or os.environ.get(DATA_ENV) or DEFAULT_DATA_DIR)


def _write_lines(path, lines) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")
            n += 1
    return n


def _load_targets(path):
    text = Path(path).read_text(encoding="utf-8")
    return parse_test_list(text, Origin.GLOBAL)


def _vantage_from_args(args) -> VantagePoint:
    return VantagePoint(args.vantage_id, args.country, args.asn, args.vantage_kind)


def _started_at(args) -> Optional[datetime]:
    return parse_ts(args.started_at) if args.started_at else None


def _add_vantage_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vantage-id", default="sim-vp-1")
    p.add_argument("--country", default="ZZ", help="ISO 3166 alpha-2 code")
    p.add_argument("--asn", type=int, default=64500)
    p.add_argument("--vantage-kind", default="vpn", choices=["vpn", "device", "volunteer"])


# -- sim -----------------------------------------------------------------------


def cmd_sim(args) -> int:
    scenario = netsim.load_scenario(args.scenario)
    if args.action == "check":
        d = netsim.scenario_to_dict(scenario)
        print(f"scenario ok: seed={scenario.seed} servers={len(d['servers'])} "
              f"path_elements={len(d['path_elements'])}")
        for e in d["path_elements"]:
            print(f"  {e['type']}")
        return 0
    if args.targets is None or args.out is None:
        raise CliError(f"sim {args.action} needs --targets and --out")
    targets = _load_targets(args.targets)
    vp = _vantage_from_args(args)
    if args.action == "record":
        direct = RecordingTransport(SimTransport(scenario, vp.kind.value))
        control = RecordingTransport(direct.inner.control())
        ProbeAgent(vp, direct, control).run(targets, _started_at(args))
        direct.dump(args.out)
        ctrl_out = args.control_out or str(Path(args.out).with_suffix(".control.jsonl"))
        control.dump(ctrl_out)
        print(f"recorded {len(targets)} targets -> {args.out}, {ctrl_out}")
        return 0
    direct = SimTransport(scenario, vp.kind.value)
    return _probe(direct, direct.control(), targets, vp, args)


# -- probe ----------------------------------------------------------------------


def _probe(direct, control, targets, vp, args) -> int:
    agent = ProbeAgent(vp, direct, control, Mode(args.mode), workers=args.workers)
    records = agent.run(targets, _started_at(args), local_only=args.local_only)
    _write_lines(args.out, (serialize_report(r) for r in records))
    censored = sum(1 for r in records if r.verdict is not None and r.verdict.outcome.value == "censored")
    summary = f"{len(records)} reports -> {args.out}"
    if agent.mode is Mode.CLASSIFY:
        summary += f" ({censored} censored)"
    print(summary)
    return 0


def cmd_probe(args) -> int:
    targets = _load_targets(args.targets)
    vp = _vantage_from_args(args)
    if args.scenario:
        direct = SimTransport(netsim.load_scenario(args.scenario), vp.kind.value)
        control = direct.control()
    elif args.fixtures:
        if not args.control_fixtures:
            raise CliError("--fixtures needs --control-fixtures")
        direct = RecordedTransport.load(args.fixtures)
        control = RecordedTransport.load(args.control_fixtures)
    else:
        raise CliError("probe needs --scenario or --fixtures")
    return _probe(direct, control, targets, vp, args)


# -- detect ---------------------------------------------------------------------


def cmd_detect(args) -> int:
    db = load_fingerprints(args.fingerprints)
    out = []
    counts: dict[str, int] = {}
    for line in read_lines(args.reports):
        rec = read_record(line)
        verdict = detectors.detect(rec.measurement, db)
        counts[verdict.outcome.value] = counts.get(verdict.outcome.value, 0) + 1
        out.append(serialize_verdict(verdict, rec.vantage_point))
    _write_lines(args.out, out)
    summary = ", ".join(f"{k}={v}" for k, v in sorted(counts.items())) or "no reports"
    print(f"{len(out)} verdicts -> {args.out} ({summary})")
    return 0


# -- controller -----------------------------------------------------------------


def cmd_serve(args) -> int:
    store = ControllerStore(_data_dir(args))
    server = make_server(store, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"controller listening on http://{host}:{port} (data in {store.dir})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        store.close()
    return 0


def cmd_register(args) -> int:
    store = ControllerStore(_data_dir(args))
    try:
        token = store.register_vantage(_vantage_from_args(args))
    finally:
        store.close()
    print(token)
    return 0


def cmd_submit(args) -> int:
    lines = read_lines(args.reports)
    store = ControllerStore(_data_dir(args))
    try:
        ack = store.submit_report(args.token, lines)
    finally:
        store.close()
    print(f"accepted={ack.accepted} stored={ack.stored} duplicates={ack.duplicates} errors={len(ack.errors)}")
    for i, msg in ack.errors:
        print(f"  line {i + 1}: {msg}", file=sys.stderr)
    return 0 if not ack.errors else 1


def cmd_schedule(args) -> int:
    store = ControllerStore(_data_dir(args))
    try:
        if args.targets:
            n = store.add_target_list(args.target_list, _load_targets(args.targets))
            print(f"target list {args.target_list}: {n} targets")
        spec = ExperimentSpec(
            id=args.id,
            target_list=args.target_list,
            selector=Selector.parse(args.selector),
            created_at=parse_ts(args.created_at) if args.created_at else datetime.now().astimezone(),
            every_hours=args.every_hours,
            horizon_hours=args.horizon_hours,
        )
        assignments = store.schedule(spec)
    finally:
        store.close()
    vps = sorted({a.vantage for a in assignments})
    print(f"experiment {spec.id}: {len(assignments)} assignments across {len(vps)} vantage points")
    return 0


def cmd_list(args) -> int:
    store = ControllerStore(_data_dir(args))
    try:
        if args.what == "vantages":
            for vp in store.list_vantages():
                print(f"{vp.id}\t{vp.country}\tAS{vp.asn}\t{vp.kind.value}")
        elif args.what == "target-lists":
            for name, targets in sorted(store.target_lists.items()):
                print(f"{name}\t{len(targets)}")
        elif args.what == "experiments":
            for spec in sorted(store.experiments.values(), key=lambda s: s.id):
                print(f"{spec.id}\t{spec.target_list}\t{spec.selector}\t{len(store.assignments_for(spec.id))}")
        else:
            print(f"{store.report_count()} reports")
    finally:
        store.close()
    return 0


def cmd_export(args) -> int:
    store = ControllerStore(_data_dir(args))
    try:
        if args.target_list:
            Path(args.out).write_text(store.export_target_list(args.target_list), encoding="utf-8")
            print(f"target list {args.target_list} -> {args.out}")
            return 0
        recs = store.query_reports(
            country=args.country,
            vantage=args.vantage,
            since=parse_ts(args.since) if args.since else None,
            until=parse_ts(args.until) if args.until else None,
        )
        vps = {vp.id: vp for vp in store.list_vantages()}
    finally:
        store.close()
    lines = []
    for r in recs:
        if r.vantage_point is None and r.measurement.vantage in vps:
            r = type(r)(r.measurement, r.mode, r.verdict, r.local_only, vps[r.measurement.vantage])
        lines.append(serialize_report(r))
    n = _write_lines(args.out, lines)
    print(f"{n} reports -> {args.out}")
    return 0


# -- aggregate ------------------------------------------------------------------


def _registry(args, embedded) -> dict[str, VantagePoint]:
    reg = dict(embedded)
    if args.vantages:
        for line in read_lines(args.vantages):
            vp = vantage_from_dict(json.loads(line))
            reg[vp.id] = vp
    return reg


def cmd_aggregate(args) -> int:
    embedded: dict[str, VantagePoint] = {}
    verdicts = []
    if args.verdicts:
        for line in read_lines(args.verdicts):
            v, vp = deserialize_verdict(line)
            verdicts.append(v)
            if vp is not None:
                embedded[vp.id] = vp
    reports = []
    if args.reports:
        for line in read_lines(args.reports):
            rec = read_record(line)
            reports.append(rec)
            if rec.vantage_point is not None:
                embedded[rec.vantage_point.id] = rec.vantage_point
    registry = _registry(args, embedded)

    kind = args.kind
    if kind in ("fractions", "rst", "centralization") and not args.verdicts:
        raise CliError(f"aggregate --kind {kind} needs --verdicts")
    if kind == "fractions":
        analysis = aggregate.least_free_ranking(verdicts, registry)
        for f in analysis:
            print(f"{f.country}\t{f.total:.3f}\t{f.censored}/{f.tested}" + ("\tmarginal" if f.marginal else ""))
    elif kind == "rst":
        analysis = aggregate.rst_ranking(verdicts)
        print(f"{len(analysis)} targets with RST evidence")
    elif kind == "centralization":
        analysis = aggregate.centralization_by_country(verdicts, registry, args.threshold)
        for c, s in analysis.items():
            print(f"{c}\t{s.label}")
    elif kind == "diversity":
        analysis = aggregate.as_diversity(registry, reports if args.reports else None)
        mean = analysis.mean
        print("mean distinct ASNs per country: " + ("n/a" if mean is None else f"{mean:.2f}"))
    else:
        if not (args.start and args.end):
            raise CliError("aggregate --kind matrix needs --start and --end (YYYY-MM-DD)")
        analysis = aggregate.availability_matrix(reports, registry, date.fromisoformat(args.start), date.fromisoformat(args.end))
        print(f"{len(analysis.countries)} countries x {len(analysis.days)} days, {len(analysis.cells)} marked cells")
    Path(args.out).write_text(aggregate.emit_plot_data(analysis, kind), encoding="utf-8")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="censorscope", description="Censorship measurement toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def probe_flags(p):
        p.add_argument("--targets", help="test list CSV (url,category)")
        p.add_argument("--out", help="report file to write (JSON lines)")
        p.add_argument("--mode", choices=["raw", "classify"], default="raw")
        p.add_argument("--started-at", help="fixed measurement timestamp (ISO 8601)")
        p.add_argument("--local-only", action="store_true", help="volunteer opt-out from publication")
        p.add_argument("--workers", type=int, default=1)
        _add_vantage_flags(p)

    p = sub.add_parser("sim", help="validate a scenario, or measure/record through it")
    p.add_argument("action", choices=["check", "run", "record"])
    p.add_argument("--scenario", required=True)
    p.add_argument("--control-out", help="record: where to write the control-channel fixture")
    probe_flags(p)
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("probe", help="run the test battery over a test list")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenario", help="simulated network (JSON)")
    src.add_argument("--fixtures", help="recorded transport answers (JSON lines)")
    p.add_argument("--control-fixtures")
    probe_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("detect", help="turn report records into verdicts")
    p.add_argument("--reports", required=True)
    p.add_argument("--fingerprints", help="fingerprint file (default: bundled)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    def data_flag(p):
        p.add_argument("--data-dir", help=f"controller data directory (env {DATA_ENV})")

    p = sub.add_parser("serve", help="run the controller HTTP service")
    data_flag(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8750)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("register", help="register a vantage point; prints its token")
    data_flag(p)
    _add_vantage_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("submit", help="store report records under a vantage point token")
    data_flag(p)
    p.add_argument("--token", required=True)
    p.add_argument("--reports", required=True)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("schedule", help="schedule an experiment")
    data_flag(p)
    p.add_argument("--id", required=True)
    p.add_argument("--target-list", required=True)
    p.add_argument("--targets", help="upload this CSV as the target list first")
    p.add_argument("--selector", default="all", help="all | country:IR,SA | vantages:id1,id2")
    p.add_argument("--every-hours", type=int)
    p.add_argument("--horizon-hours", type=int, default=24)
    p.add_argument("--created-at")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("list", help="show controller state")
    data_flag(p)
    p.add_argument("what", choices=["vantages", "target-lists", "experiments", "reports"])
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("export", help="export stored reports or a target list")
    data_flag(p)
    p.add_argument("--out", required=True)
    p.add_argument("--target-list")
    p.add_argument("--country")
    p.add_argument("--vantage")
    p.add_argument("--since")
    p.add_argument("--until")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("aggregate", help="compute a country-level analysis as a TSV table")
    p.add_argument("--kind", required=True, choices=aggregate.PLOT_KINDS)
    p.add_argument("--verdicts")
    p.add_argument("--reports")
    p.add_argument("--vantages", help="vantage point registry (JSON lines)")
    p.add_argument("--start")
    p.add_argument("--end")
    p.add_argument("--threshold", type=float, default=aggregate.CENTRALIZATION_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ControllerError, ValidationError, ReportParseError, OSError, ValueError, KeyError) as exc:
        print(f"censorscope: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
