"""Operator commands: converge, serve, inspect, scale, promote, package.

Commands coordinate through the state directory, never via RPC: `apply`
writes the desired topology and converges whatever nodes no serve process
owns; a running `serve` notices the changed desired file and converges its
own node. The directory comes from `--state` unless FLAGFORGE_STATE is set,
which wins.
"""

from __future__ import annotations

import argparse
import os
import signal
import sys
import threading
import time
from dataclasses import replace
from pathlib import Path

from .errors import FlagforgeError
from .model import ROLE_BACKEND, parse_topology, validate_topology
from .pipeline import MODE_DEPLOY, MODE_DEV, package_artifact
from .runtime import Cluster, NodeService, StateStore, status_rows

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


def _state_store(args: argparse.Namespace) -> StateStore:
    root = os.environ.get("FLAGFORGE_STATE") or args.state
    return StateStore(Path(root))


def _split_ownership(store: StateStore,
                     node_ids) -> tuple[list[str], dict[str, int]]:
    """Nodes this command may drive vs nodes owned by live serve processes."""
    served: dict[str, int] = {}
    free: list[str] = []
    for node_id in node_ids:
        owner = store.lock_owner(node_id)
        if owner is None:
            free.append(node_id)
        else:
            served[node_id] = owner
    return free, served


def _converge(store: StateStore, topology, out) -> int:
    free, served = _split_ownership(store, topology.nodes)
    cluster = Cluster(topology, store, hosted=free, bind_listeners=False)
    try:
        report = cluster.converge(exclude_nodes=set(served))
    finally:
        cluster.shutdown()
    print(report.render(), file=out)
    for node_id in sorted(served):
        print(f"{node_id}: delegated to serve process (pid {served[node_id]})",
              file=out)
    return EXIT_OK if report.all_ok else EXIT_PARTIAL


def cmd_apply(args: argparse.Namespace) -> int:
    try:
        text = Path(args.topology).read_text()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    topology = parse_topology(text)
    validate_topology(topology)
    return _converge(_state_store(args), topology, sys.stdout)


def cmd_serve(args: argparse.Namespace) -> int:
    root = os.environ.get("FLAGFORGE_STATE") or args.state
    service = NodeService(
        topology_path=Path(args.topology) if args.topology else None,
        node_id=args.node, state_root=Path(root),
        store_dir=Path(args.store) if args.store else None, mode=args.mode)
    try:
        failures = service.start()
        if failures:
            for failure in failures:
                print(f"error: {failure}", file=sys.stderr)
            return EXIT_ERROR
        print(f"serving {args.node} from {root}", flush=True)
        stop = threading.Event()
        for signum in (signal.SIGINT, signal.SIGTERM):
            signal.signal(signum, lambda *_: stop.set())
        stop.wait()
    finally:
        service.stop()
    return EXIT_OK


def cmd_status(args: argparse.Namespace) -> int:
    rows = status_rows(_state_store(args))
    if not rows:
        print("no deployments")
        return EXIT_OK
    for row in rows:
        if args.porcelain:
            print("challenge={challenge} backend={backend} version={version}"
                  " healthy={healthy} desired={desired} state={state}"
                  " port={port} stick={stick}".format(**row))
        else:
            print(f"{row['challenge']} {row['backend']} {row['version']}"
                  f" {row['healthy']}/{row['desired']} {row['state']}"
                  f" {row['port']}")
    return EXIT_OK


def cmd_scale(args: argparse.Namespace) -> int:
    store = _state_store(args)
    persisted = store.load_desired()
    if persisted is None:
        print("error: no applied topology", file=sys.stderr)
        return EXIT_ERROR
    topology, _ = persisted
    if args.challenge not in topology.challenges:
        print(f"error: unknown challenge {args.challenge!r}", file=sys.stderr)
        return EXIT_ERROR
    if args.count < 1:
        print("error: replica count must be at least 1; remove the challenge"
              " from the topology instead", file=sys.stderr)
        return EXIT_ERROR
    spec = replace(topology.challenges[args.challenge],
                   replica_count=args.count)
    challenges = dict(topology.challenges)
    challenges[args.challenge] = spec
    return _converge(store, replace(topology, challenges=challenges),
                     sys.stdout)


def cmd_pipeline(args: argparse.Namespace) -> int:
    store = _state_store(args)
    persisted = store.load_desired()
    if persisted is None:
        print("error: no applied topology (run apply first)", file=sys.stderr)
        return EXIT_ERROR
    topology, _ = persisted
    free, served = _split_ownership(store, topology.nodes)
    backends_free = [n for n in free
                     if topology.nodes[n].role == ROLE_BACKEND]
    if not backends_free and args.mode == MODE_DEV:
        # served backends poll the store themselves
        for node_id in sorted(served):
            print(f"{node_id}: delegated to serve process"
                  f" (pid {served[node_id]})")
        return EXIT_OK
    select = args.select.split(",") if args.select else None
    cluster = Cluster(topology, store, hosted=free, bind_listeners=False)
    try:
        while True:
            report = cluster.pipeline_once(args.mode, Path(args.store),
                                           select=select)
            print(report.render(), flush=True)
            if args.action == "run-once":
                break
            time.sleep(cluster.topology.poll_interval)
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        cluster.shutdown()
    failed = any(o.state == "failed" for o in report.outcomes)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_package(args: argparse.Namespace) -> int:
    try:
        bundle = package_artifact(Path(args.source), Path(args.store))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(bundle)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--state", default="state",
                        help="state directory (FLAGFORGE_STATE wins over this)")

    parser = argparse.ArgumentParser(
        prog="flagforge",
        description="declarative hosting for CTF challenge services")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("apply", parents=[common],
                       help="converge the cluster to a topology file")
    p.add_argument("topology", help="topology document to apply")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("serve", parents=[common],
                       help="host one node until signaled")
    p.add_argument("--node", required=True, help="node id from the topology")
    p.add_argument("--topology", default=None,
                   help="topology file to bootstrap an empty state directory")
    p.add_argument("--store", default=None,
                   help="artifact store to poll in dev mode")
    p.add_argument("--mode", choices=(MODE_DEV, MODE_DEPLOY),
                   default=MODE_DEV, help="pipeline mode for the poll loop")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("status", parents=[common],
                       help="one line per challenge per backend")
    p.add_argument("--porcelain", action="store_true",
                   help="stable key=value output for scripts")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("scale", parents=[common],
                       help="change a challenge's replica count")
    p.add_argument("challenge")
    p.add_argument("count", type=int)
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("pipeline", parents=[common],
                       help="promote artifacts from the store")
    p.add_argument("action", choices=("run-once", "watch"))
    p.add_argument("--mode", choices=(MODE_DEV, MODE_DEPLOY), default=MODE_DEV)
    p.add_argument("--select", default=None,
                   help="comma-separated challenge names")
    p.add_argument("--store", default="store", help="artifact store directory")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("package", help="bundle a challenge source directory")
    p.add_argument("source", help="directory containing challenge.meta")
    p.add_argument("--store", default="store", help="artifact store directory")
    p.set_defaults(func=cmd_package)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FlagforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def console() -> None:
    raise SystemExit(main())
