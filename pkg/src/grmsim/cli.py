"""Command-line entry point.

Subcommands::

    gen-trials <matrix.cfg> [-o trials.csv]      expand the trial matrix to CSV
    run <trials.csv|matrix.cfg> [options]        execute a batch, writing a session
    analyze <session-dir> [--table|--repeatability|--edges]
    proto-dump <file>                            pretty-print a captured frame stream
    validate-objects <objects.std>               compatibility report for a library
    serve-device [--bind host:port]              serve a simulated rig over TCP

Exit codes: 0 ok, 2 config error, 3 device fault, 4 log corruption,
5 analysis error. All output is deterministic for a given seed.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from importlib import resources

from . import datalog, records, report
from .device import DeviceConfig, GrmDevice, load_device_config
from .manipulator import ArmServer, GripperModel
from .objects import load_object_library
from .orchestrator import (
    BatchPolicy,
    InvalidConfig,
    TrialCsvError,
    TrialMatrixConfig,
    TrialRunner,
    export_trials_csv,
    generate_table_trials,
    load_matrix_config,
    load_trial_csv,
    trials_csv_text,
)
from .protocol import (
    ActionClient,
    CrcMismatch,
    DeviceServer,
    InprocTransport,
    MsgKind,
    OpCode,
    TcpServerRunner,
    TcpTransport,
    TransportClosed,
    TruncatedFrame,
    UnknownMsgType,
    decode_frame,
    decode_message,
)
from .types import validate_lower_compat, validate_swap_compat

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEVICE = 3
EXIT_LOG = 4
EXIT_ANALYSIS = 5


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _data_path(name: str):
    return resources.files("grmsim.data").joinpath(name)


def _load_objects(path: str | None):
    if path is None:
        with resources.as_file(_data_path("objects.std")) as p:
            return load_object_library(p)
    return load_object_library(path)


def _load_matrix(path: str | None) -> TrialMatrixConfig:
    if path is None:
        with resources.as_file(_data_path("table1.cfg")) as p:
            return load_matrix_config(p)
    return load_matrix_config(path)


def _sniff_specs(path: str, objects) -> tuple[list, TrialMatrixConfig | None]:
    """Accept either a trial CSV or a matrix config; return (specs, matrix-if-any)."""
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if first.startswith("{"):
        cfg = load_matrix_config(path)
        return generate_table_trials(cfg), cfg
    specs = load_trial_csv(path, known_objects=objects)
    return specs, None


def cmd_gen_trials(args) -> int:
    cfg = _load_matrix(args.config)
    specs = generate_table_trials(cfg)
    if args.output:
        export_trials_csv(specs, args.output)
        print(f"wrote {len(specs)} trials to {args.output}")
    else:
        sys.stdout.write(trials_csv_text(specs))
    return EXIT_OK


def _build_device_config(args) -> DeviceConfig:
    if getattr(args, "device_config", None):
        cfg = load_device_config(args.device_config)
    else:
        cfg = DeviceConfig()
    for pair in getattr(args, "device_opt", None) or []:
        cfg.apply_overrides([pair])
    return cfg


def cmd_run(args) -> int:
    objects = _load_objects(args.objects)
    specs, matrix = _sniff_specs(args.input, objects)
    if not specs:
        raise CliError("no trials to run", EXIT_CONFIG)
    if args.config:
        matrix = _load_matrix(args.config)

    digest = hashlib.sha256(trials_csv_text(specs).encode()).hexdigest()[:8]
    session_id = f"run-seed{args.seed:08d}-{digest}"
    out_dir = args.out or session_id

    needed = []
    for s in specs:
        if s.object_id not in needed:
            needed.append(s.object_id)
    platform_object = needed[0]
    storage = [oid for oid in objects if oid != platform_object]

    device_cfg = _build_device_config(args)
    if args.device == "inproc":
        device = GrmDevice(
            config=device_cfg,
            objects=objects,
            platform_object=platform_object,
            storage=storage,
        )
        device_client = ActionClient(InprocTransport(DeviceServer(device)))
    else:
        host, _, port = args.device.removeprefix("tcp:").partition(":")
        try:
            device_client = ActionClient(TcpTransport(host, int(port)))
        except (OSError, ValueError) as e:
            raise CliError(f"cannot connect to device at {args.device}: {e}", EXIT_DEVICE)
    arm_client = ActionClient(InprocTransport(ArmServer(objects, GripperModel())))

    writer = datalog.SessionWriter(out_dir, session_id)
    if matrix is not None:
        for kind, fields in matrix.to_records():
            writer.add_manifest_record(kind, fields)
    runner = TrialRunner(
        device=device_client, arm=arm_client, objects=objects, writer=writer
    )
    policy = BatchPolicy.ABORT_ON_FAULT if args.policy == "abort" else BatchPolicy.SKIP_ON_FAULT
    try:
        summary = runner.run_batch(
            specs, batch_seed=args.seed, policy=policy, session_ref=session_id
        )
    finally:
        writer.close()
    print(f"session {session_id} -> {out_dir}")
    print(
        f"completed {summary.completed}  aborted {summary.aborted}  "
        f"successes {summary.success_count}  simulated {summary.elapsed_ms / 1000.0:.1f} s"
    )
    if summary.aborted and policy is BatchPolicy.ABORT_ON_FAULT:
        raise CliError("batch stopped on device fault", EXIT_DEVICE)
    return EXIT_OK


def cmd_analyze(args) -> int:
    try:
        session = datalog.read_session(args.session)
    except datalog.DatalogError as e:
        raise CliError(f"cannot read session: {e}", EXIT_LOG)
    recs = session.trial_records
    if not recs:
        raise CliError("session has no trial records", EXIT_ANALYSIS)
    wants_all = not (args.table or args.repeatability or args.edges)
    out = []
    if args.repeatability or wants_all:
        try:
            rep = report.repeatability_stats(recs)
        except report.AnalysisError as e:
            raise CliError(str(e), EXIT_ANALYSIS)
        out.append("# repeatability\n" + report.format_repeatability(rep))
    if args.table or args.edges or wants_all:
        matrix = None
        if args.config:
            matrix = _load_matrix(args.config)
        else:
            entries = []
            for kind in ("trial_matrix", "matrix_row"):
                entries += [(kind, f) for f in session.extras.get(kind, [])]
            if entries:
                try:
                    matrix = TrialMatrixConfig.from_records(entries)
                except InvalidConfig as e:
                    raise CliError(f"embedded matrix config invalid: {e}", EXIT_LOG)
        if args.table and matrix is None:
            raise CliError("success table needs a trial matrix: pass --config", EXIT_ANALYSIS)
        if matrix is not None and (args.table or wants_all):
            try:
                table = report.success_table(recs, matrix)
            except report.AnalysisError as e:
                raise CliError(str(e), EXIT_ANALYSIS)
            out.append("# success table\n" + report.format_success_table(
                table, as_csv=args.format == "csv"))
        if args.edges or wants_all:
            groups = report.edge_cells(recs)
            out.append("# edge boundaries\n" + report.format_edges(
                groups, as_csv=args.format == "csv"))
    print(("\n\n").join(out))
    return EXIT_OK


def cmd_proto_dump(args) -> int:
    with open(args.file, "rb") as f:
        buf = f.read()
    pos = 0
    while pos < len(buf):
        window = buf[pos:]
        try:
            msg_type, payload, consumed = decode_frame(window)
        except TruncatedFrame as e:
            trailing = len(window) - e.consumed
            if e.consumed:
                print(f"{pos:08x}  skip {e.consumed} byte(s)")
            if trailing:
                print(f"{pos + e.consumed:08x}  {trailing} trailing byte(s) (incomplete frame)")
            break
        except CrcMismatch as e:
            print(f"{pos:08x}  bad crc, resync (+{e.consumed})")
            pos += e.consumed
            continue
        except UnknownMsgType as e:
            print(f"{pos:08x}  unknown msg type (+{e.consumed})")
            pos += e.consumed
            continue
        frame_off = pos + consumed - (len(payload) + 6)
        if frame_off != pos:
            print(f"{pos:08x}  skip {frame_off - pos} byte(s)")
        try:
            msg = decode_message(msg_type, payload)
            kind = MsgKind(msg_type).name.lower()
            try:
                op = OpCode(msg.op_code).name.lower() if msg.op_code else "-"
            except ValueError:
                op = f"op=0x{msg.op_code:02x}"
            brief = {k: v for k, v in msg.params.items() if k not in ("state", "trajectory")}
            print(f"{frame_off:08x}  {kind:8s} id={msg.action_id} op={op} len={len(payload)} {brief}")
        except Exception as e:  # undecodable params in a CRC-valid frame
            print(f"{frame_off:08x}  type=0x{msg_type:02x} len={len(payload)} (params: {e})")
        pos += consumed
    return EXIT_OK


def cmd_validate_objects(args) -> int:
    objects = load_object_library(args.file) if args.file else _load_objects(None)
    any_lower_violation = False
    for oid, obj in objects.items():
        lower = validate_lower_compat(obj)
        swap = validate_swap_compat(obj)
        lower_s = "ok" if not lower else "; ".join(lower)
        swap_s = "ok" if not swap else "; ".join(swap)
        print(f"{oid:12s} lower: {lower_s:40s} swap: {swap_s}")
        if lower:
            any_lower_violation = True
    if any_lower_violation:
        raise CliError("one or more objects are not rig-compatible", EXIT_CONFIG)
    return EXIT_OK


def cmd_serve_device(args) -> int:
    objects = _load_objects(args.objects)
    ids = list(objects)
    device = GrmDevice(
        config=_build_device_config(args),
        objects=objects,
        platform_object=args.platform_object or ids[0],
        storage=[oid for oid in ids if oid != (args.platform_object or ids[0])],
    )
    host, _, port = args.bind.partition(":")
    runner = TcpServerRunner(DeviceServer(device), host, int(port))
    print(f"serving device on {runner.host}:{runner.port}")
    try:
        runner.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grmsim", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trials", help="expand a trial matrix config into a CSV")
    g.add_argument("config", nargs="?", help="matrix config (default: shipped table)")
    g.add_argument("-o", "--output", help="output CSV path (default: stdout)")
    g.set_defaults(func=cmd_gen_trials)

    r = sub.add_parser("run", help="run a batch of trials against a device")
    r.add_argument("input", help="trial CSV or matrix config")
    r.add_argument("--device", default="inproc", help="inproc or tcp:host:port")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--policy", choices=["abort", "skip"], default="skip")
    r.add_argument("--out", help="session directory (default: derived from seed+input)")
    r.add_argument("--objects", help="object library file (default: shipped set)")
    r.add_argument("--config", help="matrix config to embed for later analysis")
    r.add_argument("--device-config", help="device config record file")
    r.add_argument("--device-opt", action="append", metavar="KEY=VALUE",
                   help="override one device config parameter (repeatable)")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="report on a recorded session")
    a.add_argument("session", help="session directory")
    a.add_argument("--table", action="store_true")
    a.add_argument("--repeatability", action="store_true")
    a.add_argument("--edges", action="store_true")
    a.add_argument("--config", help="matrix config (if not embedded in the session)")
    a.add_argument("--format", choices=["text", "csv"], default="text")
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("proto-dump", help="pretty-print a binary frame stream")
    d.add_argument("file")
    d.set_defaults(func=cmd_proto_dump)

    v = sub.add_parser("validate-objects", help="compatibility check an object library")
    v.add_argument("file", nargs="?", help="object library (default: shipped set)")
    v.set_defaults(func=cmd_validate_objects)

    s = sub.add_parser("serve-device", help="serve a simulated rig over TCP")
    s.add_argument("--bind", default="127.0.0.1:0")
    s.add_argument("--objects")
    s.add_argument("--platform-object")
    s.add_argument("--device-config")
    s.add_argument("--device-opt", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_serve_device)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (InvalidConfig, TrialCsvError, records.RecordError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except datalog.DatalogError as e:
        print(f"log error: {e}", file=sys.stderr)
        return EXIT_LOG
    except (TransportClosed, OSError) as e:
        print(f"device error: {e}", file=sys.stderr)
        return EXIT_DEVICE
    except report.AnalysisError as e:
        print(f"analysis error: {e}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
