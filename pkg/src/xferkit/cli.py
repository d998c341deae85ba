"""Command-line interface.

One binary covering endpoint serving, credential registration, transfer
submission and monitoring, the object-store simulator, and benchmark
sweeps with model fitting.

Exit codes (stable):
    0  success
    2  bad flags / unknown connector (argparse also uses 2)
    3  bind failure
    4  task failed
    5  coordinator unreachable
    6  benchmark plan validation failure

Human-readable output goes to stdout, logs to stderr; --output jsonl
switches status and report output to one JSON object per line. Credential
secrets are never printed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .connectors import (Credential, CredentialKind, LOCAL_USER,
                         connector_names)
from .engine import Integrity, LocalEndpoint, TransferSpec
from .errors import ConfigInvalid, EndpointUnreachable, TransferError

log = logging.getLogger("xferkit.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BIND = 3
EXIT_TASK_FAILED = 4
EXIT_COORDINATOR = 5
EXIT_PLAN = 6

ENV_COORDINATOR = "XFERKIT_COORDINATOR"
ENV_JOURNAL_DIR = "XFERKIT_JOURNAL_DIR"
ENV_VAULT_DIR = "XFERKIT_VAULT_DIR"

WATCH_POLL_S = 0.5


def _parse_hostport(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {value!r}")
    return host, int(port)


def _parse_config(pairs: list[str]) -> dict[str, str]:
    config = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=val, got {pair!r}")
        config[key] = value
    return config


def _parse_endpoint_path(value: str) -> tuple[str, str]:
    endpoint, sep, path = value.partition(":")
    if not sep or not endpoint:
        raise argparse.ArgumentTypeError(f"expected endpoint:path, got {value!r}")
    return endpoint, path


def _journal_dir(args) -> str:
    return (getattr(args, "journal_dir", None)
            or os.environ.get(ENV_JOURNAL_DIR)
            or os.path.join(os.path.expanduser("~"), ".xferkit", "journals"))


def _coordinator_addr(args) -> tuple[str, int]:
    value = getattr(args, "coordinator", None) or os.environ.get(ENV_COORDINATOR)
    if not value:
        raise EndpointUnreachable(
            f"no coordinator address (use --coordinator or ${ENV_COORDINATOR})")
    return _parse_hostport(value)


def _emit(args, payload: dict, human: str) -> None:
    if getattr(args, "output", "text") == "jsonl":
        print(json.dumps(payload), flush=True)
    else:
        print(human, flush=True)


# -- endpoint ----------------------------------------------------------------


def cmd_endpoint_serve(args) -> int:
    from .endpoint import endpoint_serve

    config = _parse_config(args.config)
    vault_dir = args.vault_dir or os.environ.get(ENV_VAULT_DIR)
    try:
        server = endpoint_serve(_parse_hostport(args.bind), args.connector, config,
                                default_credential=LOCAL_USER,
                                vault_dir=vault_dir)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"bind failed: {exc}", file=sys.stderr)
        return EXIT_BIND
    host, port = server.address
    print(f"endpoint {args.id} serving connector={args.connector} on {host}:{port}",
          flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


def cmd_credential_register(args) -> int:
    from .endpoint import register_credential

    secret = args.secret
    if args.secret_file:
        secret = Path(args.secret_file).read_text().strip()
    credential = Credential(kind=CredentialKind(args.kind),
                            payload=(secret or "").encode(),
                            endpoint_scope=args.scope)
    try:
        ref = register_credential(_parse_hostport(args.endpoint), credential)
    except (EndpointUnreachable, OSError) as exc:
        print(f"endpoint unreachable: {exc}", file=sys.stderr)
        return EXIT_COORDINATOR
    _emit(args, {"credential_ref": ref}, ref)
    return EXIT_OK


# -- coordinator ----------------------------------------------------------------


def cmd_coordinator_serve(args) -> int:
    from .coordinator import Coordinator

    try:
        coord = Coordinator(journal_dir=_journal_dir(args),
                            bind=_parse_hostport(args.bind),
                            startup_delay=args.startup_delay,
                            control_rtt=args.control_rtt).start()
    except OSError as exc:
        print(f"bind failed: {exc}", file=sys.stderr)
        return EXIT_BIND
    host, port = coord.address
    print(f"coordinator serving on {host}:{port} "
          f"(journals: {_journal_dir(args)})", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        coord.stop()
    return EXIT_OK


def cmd_coordinator_add_endpoint(args) -> int:
    from .coordinator import CoordinatorClient

    try:
        client = CoordinatorClient(_coordinator_addr(args))
        client.register_endpoint(args.id, _parse_hostport(args.address))
        client.close()
    except (EndpointUnreachable, TransferError) as exc:
        print(f"coordinator unreachable: {exc}", file=sys.stderr)
        return EXIT_COORDINATOR
    _emit(args, {"registered": args.id}, f"registered endpoint {args.id}")
    return EXIT_OK


# -- transfers ----------------------------------------------------------------


def _watch(args, client, task_id: str) -> int:
    while True:
        status = client.status(task_id)
        payload = {"task_id": task_id, **status}
        human = (f"{status['state']:>10}  {status['files_done']}/{status['files']} files  "
                 f"{int(status['bytes_moved']):,}/{int(status['bytes_total']):,} bytes  "
                 f"retries={status['retries']}")
        _emit(args, payload, human)
        if status["state"] in ("succeeded", "failed", "canceled"):
            return EXIT_OK if status["state"] == "succeeded" else EXIT_TASK_FAILED
        time.sleep(WATCH_POLL_S)


def cmd_transfer(args) -> int:
    from .coordinator import CoordinatorClient

    spec = TransferSpec(
        source=_parse_endpoint_path(args.src),
        destination=_parse_endpoint_path(args.dst),
        cc=args.cc, parallelism=args.parallelism,
        integrity=Integrity(args.integrity),
        max_retries=args.max_retries,
        checksum_algorithm=args.checksum,
        source_cred_ref=args.src_cred, dest_cred_ref=args.dst_cred)
    try:
        client = CoordinatorClient(_coordinator_addr(args))
        task_id = client.submit(spec)
    except (EndpointUnreachable, TransferError) as exc:
        print(f"coordinator unreachable or rejected: {exc}", file=sys.stderr)
        return EXIT_COORDINATOR
    if not args.watch:
        _emit(args, {"task_id": task_id}, task_id)
        client.close()
        return EXIT_OK
    try:
        return _watch(args, client, task_id)
    finally:
        client.close()


def _task_command(args, action: str) -> int:
    from .coordinator import CoordinatorClient

    try:
        client = CoordinatorClient(_coordinator_addr(args))
    except EndpointUnreachable as exc:
        print(f"coordinator unreachable: {exc}", file=sys.stderr)
        return EXIT_COORDINATOR
    try:
        if action == "status":
            status = client.status(args.task)
            _emit(args, status, json.dumps(status, indent=1))
            return EXIT_OK
        if action == "cancel":
            client.cancel(args.task)
            _emit(args, {"canceled": args.task}, f"canceled {args.task}")
            return EXIT_OK
        client.resume(args.task)
        if args.watch:
            return _watch(args, client, args.task)
        _emit(args, {"resumed": args.task}, f"resumed {args.task}")
        return EXIT_OK
    except TransferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TASK_FAILED
    finally:
        client.close()


# -- simulator ----------------------------------------------------------------


def cmd_sim_serve(args) -> int:
    from .simserver import LinkProfile, serve

    profiles = {}
    for spec in args.profile or []:
        try:
            tag, rtt_ms, bandwidth = spec.split(":")
            profiles[tag] = LinkProfile(
                rtt=float(rtt_ms) / 1000.0,
                bandwidth=float(bandwidth) if float(bandwidth) > 0 else None,
                applies_to=tag)
        except ValueError:
            print(f"bad --profile {spec!r}; expected tag:rtt_ms:bandwidth_Bps",
                  file=sys.stderr)
            return EXIT_USAGE
    try:
        server = serve(args.root, profiles, _parse_hostport(args.bind),
                       auth_token=args.auth_token)
    except OSError as exc:
        print(f"bind failed: {exc}", file=sys.stderr)
        return EXIT_BIND
    host, port = server.address
    print(f"object-store simulator on http://{host}:{port} (root: {args.root})",
          flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


# -- bench ----------------------------------------------------------------


def _bench_dest(args, workdir: Path) -> LocalEndpoint:
    from .connectors import (MockCloudProfile, mockcloud_connector,
                             register_connector)

    if args.dest == "posix":
        return LocalEndpoint("posix", {"root": str(workdir / "dest")}, LOCAL_USER)
    if args.dest == "sim":
        if not args.sim_url:
            raise ConfigInvalid("--dest sim requires --sim-url")
        config = {"endpoint_url": args.sim_url, "bucket": args.bucket,
                  "client_tag": args.client_tag}
        if args.auth_token:
            credential = Credential(CredentialKind.BEARER_TOKEN,
                                    args.auth_token.encode())
        else:
            credential = LOCAL_USER
        return LocalEndpoint("object", config, credential)
    profile = MockCloudProfile(
        per_op_latency=args.mock_latency_ms / 1000.0,
        bandwidth_cap=args.mock_bandwidth_bps or None,
        seed=args.seed)
    name = f"bench-mock-{args.mock_latency_ms}-{args.mock_bandwidth_bps}"
    register_connector(name, mockcloud_connector(profile))
    return LocalEndpoint(name, {"root": str(workdir / "dest")}, LOCAL_USER)


def cmd_bench_dataset(args) -> int:
    from .bench import PlanError, make_dataset

    try:
        entries = make_dataset(args.total_bytes, args.files, args.dir, seed=args.seed)
    except PlanError as exc:
        print(f"plan invalid: {exc}", file=sys.stderr)
        return EXIT_PLAN
    payload = {"directory": args.dir, "files": len(entries),
               "bytes": sum(e.size for e in entries)}
    _emit(args, payload,
          f"wrote {payload['files']} files / {payload['bytes']} bytes to {args.dir}")
    return EXIT_OK


def cmd_bench_sweep(args) -> int:
    from .bench import (EngineRunner, ExperimentPlan, PlanError, PlanKind,
                        fit_and_report, run_plan)

    out_dir = Path(args.out)
    workdir = out_dir / "work"
    try:
        plan = ExperimentPlan(
            kind=PlanKind(args.kind),
            total_bytes=args.total_bytes,
            grid=[int(g) for g in args.grid.split(",")],
            repeats=args.repeats, topology=args.topology, seed=args.seed,
            file_count=args.file_count, cc=args.cc,
            parallelism=args.parallelism,
            integrity=Integrity(args.integrity))
        plan.validate()
        runner = EngineRunner(workdir, _bench_dest(args, workdir))
    except (PlanError, ValueError, ConfigInvalid) as exc:
        print(f"plan invalid: {exc}", file=sys.stderr)
        return EXIT_PLAN
    csv_path = out_dir / "results.csv"
    run_plan(plan, runner, workdir, runner.source_root, csv_path,
             log=lambda m: print(m, file=sys.stderr))
    report = fit_and_report(csv_path, out_dir, figures=not args.no_figures)
    sweep = report.sweeps[0]
    payload = {"csv": str(csv_path), **sweep.to_dict()}
    human = [f"results: {csv_path}"]
    if sweep.fitted_t0 is not None:
        human.append(f"fitted t0 = {sweep.fitted_t0 * 1000:.2f} ms, "
                     f"alpha = {sweep.fitted_alpha:.3f} s")
    if sweep.fitted_s0 is not None:
        human.append(f"fitted S0 = {sweep.fitted_s0:.3f} s, "
                     f"t_u = {sweep.fitted_t_u:.3f} s/GB")
    if sweep.pearson_rho is not None:
        human.append(f"pearson rho = {sweep.pearson_rho:.4f}")
    _emit(args, payload, "\n".join(human))
    return EXIT_OK


def cmd_bench_fit(args) -> int:
    from .bench import PlanError, fit_and_report

    try:
        report = fit_and_report(args.csv, args.out, figures=not args.no_figures)
    except (PlanError, FileNotFoundError) as exc:
        print(f"cannot fit: {exc}", file=sys.stderr)
        return EXIT_PLAN
    if getattr(args, "output", "text") == "jsonl":
        for sweep in report.sweeps:
            print(json.dumps(sweep.to_dict()), flush=True)
    else:
        print(report.render_text(), flush=True)
    return EXIT_OK


# -- parser wiring -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xferkit",
        description="managed data transfer toolkit")
    parser.add_argument("--version", action="version", version=f"xferkit {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="log more to stderr (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_output(p):
        p.add_argument("--output", choices=["text", "jsonl"], default="text",
                       help="machine-parseable output")

    # endpoint
    p_ep = sub.add_parser("endpoint", help="storage endpoint server")
    ep_sub = p_ep.add_subparsers(dest="subcommand", required=True)
    p = ep_sub.add_parser("serve", help="serve a connector over the control channel")
    p.add_argument("--bind", required=True, help="host:port (port 0 = ephemeral)")
    p.add_argument("--connector", required=True,
                   help=f"one of: {', '.join(connector_names())}")
    p.add_argument("--config", nargs="*", default=[], metavar="KEY=VAL")
    p.add_argument("--id", default="endpoint", help="printed endpoint id")
    p.add_argument("--vault-dir", default=None,
                   help=f"credential vault directory (or ${ENV_VAULT_DIR})")
    p.set_defaults(func=cmd_endpoint_serve)

    # credential
    p_cred = sub.add_parser("credential", help="credential registration")
    cred_sub = p_cred.add_subparsers(dest="subcommand", required=True)
    p = cred_sub.add_parser(
        "register",
        help="send a credential directly to an endpoint (bypasses coordinator)")
    p.add_argument("--endpoint", required=True, help="endpoint host:port")
    p.add_argument("--kind", default="access-key-pair",
                   choices=[k.value for k in CredentialKind])
    p.add_argument("--secret", default=None, help="credential secret")
    p.add_argument("--secret-file", default=None, help="read secret from file")
    p.add_argument("--scope", default="", help="endpoint scope label")
    add_output(p)
    p.set_defaults(func=cmd_credential_register)

    # coordinator
    p_coord = sub.add_parser("coordinator", help="third-party transfer coordinator")
    coord_sub = p_coord.add_subparsers(dest="subcommand", required=True)
    p = coord_sub.add_parser("serve")
    p.add_argument("--bind", required=True)
    p.add_argument("--journal-dir", default=None,
                   help=f"journal directory (or ${ENV_JOURNAL_DIR})")
    p.add_argument("--startup-delay", type=float, default=0.0,
                   help="artificial per-task startup delay in seconds")
    p.add_argument("--control-rtt", type=float, default=0.0,
                   help="emulated round-trip time to endpoints in seconds")
    p.set_defaults(func=cmd_coordinator_serve)
    p = coord_sub.add_parser("add-endpoint")
    p.add_argument("--id", required=True)
    p.add_argument("--address", required=True, help="endpoint host:port")
    p.add_argument("--coordinator", default=None,
                   help=f"coordinator host:port (or ${ENV_COORDINATOR})")
    add_output(p)
    p.set_defaults(func=cmd_coordinator_add_endpoint)

    # transfer / task management
    p = sub.add_parser("transfer", help="submit a transfer")
    p.add_argument("--from", dest="src", required=True, metavar="ENDPOINT:PATH")
    p.add_argument("--to", dest="dst", required=True, metavar="ENDPOINT:PATH")
    p.add_argument("--cc", type=int, default=1, help="files in flight")
    p.add_argument("--parallelism", type=int, default=4, help="blocks in flight per file")
    p.add_argument("--integrity", choices=["off", "strong"], default="off")
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--checksum", default="sha256", choices=["sha256", "md5"])
    p.add_argument("--src-cred", default="default", help="source credential reference")
    p.add_argument("--dst-cred", default="default", help="destination credential reference")
    p.add_argument("--watch", action="store_true",
                   help="poll status until terminal (exit 0 only on success)")
    p.add_argument("--coordinator", default=None)
    add_output(p)
    p.set_defaults(func=cmd_transfer)

    for name in ("status", "cancel", "resume"):
        p = sub.add_parser(name, help=f"{name} a task")
        p.add_argument("--task", required=True)
        p.add_argument("--coordinator", default=None)
        if name == "resume":
            p.add_argument("--watch", action="store_true")
        add_output(p)
        p.set_defaults(func=lambda args, _n=name: _task_command(args, _n))

    # simulator
    p_sim = sub.add_parser("sim", help="object-store simulator")
    sim_sub = p_sim.add_subparsers(dest="subcommand", required=True)
    p = sim_sub.add_parser("serve")
    p.add_argument("--bind", required=True)
    p.add_argument("--root", required=True, help="object storage directory")
    p.add_argument("--profile", nargs="*", default=[],
                   metavar="TAG:RTT_MS:BANDWIDTH_BPS",
                   help="link shaping per client tag (bandwidth 0 = unshaped)")
    p.add_argument("--auth-token", default=None)
    p.set_defaults(func=cmd_sim_serve)

    # bench
    p_bench = sub.add_parser("bench", help="benchmarks and model fitting")
    bench_sub = p_bench.add_subparsers(dest="subcommand", required=True)
    p = bench_sub.add_parser("dataset", help="generate an equal-split dataset")
    p.add_argument("--total-bytes", type=int, required=True)
    p.add_argument("--files", type=int, required=True)
    p.add_argument("--dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    add_output(p)
    p.set_defaults(func=cmd_bench_dataset)

    p = bench_sub.add_parser("sweep", help="run an experiment sweep")
    p.add_argument("--kind", required=True,
                   choices=["filecount", "concurrency", "size", "integrity"])
    p.add_argument("--grid", required=True, help="comma-separated grid values")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--total-bytes", type=int, default=50 * 1024 * 1024)
    p.add_argument("--file-count", type=int, default=16,
                   help="fixed file count for concurrency/integrity sweeps")
    p.add_argument("--cc", type=int, default=1)
    p.add_argument("--parallelism", type=int, default=4)
    p.add_argument("--integrity", choices=["off", "strong"], default="off")
    p.add_argument("--topology", default="direct-api",
                   help="label recorded in the CSV (e.g. conn-local, conn-cloud)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dest", choices=["mock", "posix", "sim"], default="mock")
    p.add_argument("--mock-latency-ms", type=float, default=50.0)
    p.add_argument("--mock-bandwidth-bps", type=float, default=0.0)
    p.add_argument("--sim-url", default=None)
    p.add_argument("--bucket", default="bench")
    p.add_argument("--client-tag", default="")
    p.add_argument("--auth-token", default=None)
    p.add_argument("--no-figures", action="store_true")
    add_output(p)
    p.set_defaults(func=cmd_bench_sweep)

    p = bench_sub.add_parser("fit", help="fit models over an existing CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--no-figures", action="store_true")
    add_output(p)
    p.set_defaults(func=cmd_bench_fit)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EndpointUnreachable as exc:
        print(f"unreachable: {exc}", file=sys.stderr)
        return EXIT_COORDINATOR


if __name__ == "__main__":
    sys.exit(main())
