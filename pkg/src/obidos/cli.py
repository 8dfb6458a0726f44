"""``obidos`` command line: corpus generation, the service, a thin API client and the bench driver."""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from .errors import ObidosError
from .model import UserQuery

DEFAULT_URL = "http://127.0.0.1:8700"

_WHERE = re.compile(r"^\s*([^\s=!<>]+)\s*(>=|<=|!=|==|=|<|>|\s+contains\s+)\s*(.*?)\s*$")


def parse_literal(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def parse_where(clause: str) -> list:
    m = _WHERE.match(clause)
    if not m:
        raise argparse.ArgumentTypeError(f"cannot parse predicate {clause!r}; use e.g. modality=CT or age>=40")
    attr, op, value = m.groups()
    return [attr, op.strip(), parse_literal(value)]


def query_from_args(args) -> dict | None:
    if not getattr(args, "level", None):
        return None
    return UserQuery.from_json({"level": args.level, "where": args.where or [], "binary": args.binary}).to_json()


def _emit(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _client(args):
    from .service import InstanceConfig, ServiceClient

    url = args.url
    if url is None and args.config:
        url = InstanceConfig.load(args.config).public_uri
    return ServiceClient(url or os.environ.get("OBIDOS_URL", DEFAULT_URL),
                         args.key or os.environ.get("OBIDOS_API_KEY"))


# commands


def cmd_generate(args) -> None:
    from .source import MetadataProfile, generate_synthetic_source

    counts = tuple(int(c) for c in args.counts.split(","))
    src = generate_synthetic_source(args.root, counts, seed=args.seed, image_size_bytes=args.image_size,
                                    source_id=args.source_id,
                                    metadata_profile=MetadataProfile(padding_bytes=args.metadata_padding))
    print(f"generated source {src.source_id} under {args.root}")


def cmd_serve(args) -> None:
    from .service import Instance, InstanceConfig, serve

    config = InstanceConfig.load(args.config)
    instance = Instance(config)
    try:
        serve(instance, args.host, args.port)
    finally:
        instance.close()


def cmd_rs_create(args) -> None:
    with _client(args) as c:
        _emit(c.create_replicaset(args.replica, query_from_args(args)))


def cmd_rs_get(args) -> None:
    with _client(args) as c:
        _emit(c.get_replicaset(args.id, refresh=not args.no_refresh))


def cmd_rs_update(args) -> None:
    with _client(args) as c:
        _emit(c.update_replicaset(args.id, args.replica))


def cmd_rs_delete(args) -> None:
    with _client(args) as c:
        _emit(c.delete_replicaset(args.id))


def cmd_query(args) -> None:
    with _client(args) as c:
        _emit(c.query(args.id, query_from_args(args), force_load=args.force_load))


def cmd_share(args) -> None:
    from .service import ServiceClient

    with _client(args) as c:
        envelope = c.make_envelope(args.id, args.receiver, args.kind, args.grant_ttl)
    if args.out:
        Path(args.out).write_bytes(envelope.to_bytes())
        print(f"wrote {len(envelope.to_bytes())}-byte envelope to {args.out}")
    if args.to:
        with ServiceClient(args.to, args.to_key) as receiver:
            _emit(receiver.share(envelope))
    if not args.out and not args.to:
        sys.stdout.write(envelope.to_bytes().decode() + "\n")


def cmd_import(args) -> None:
    from .sharing import ShareEnvelope

    envelope = ShareEnvelope.from_bytes(Path(args.file).read_bytes())
    with _client(args) as c:
        _emit(c.share(envelope))


def cmd_materialize(args) -> None:
    with _client(args) as c:
        _emit(c.materialize(args.id))


def cmd_gc(args) -> None:
    with _client(args) as c:
        _emit(c.gc())


def cmd_bench(args) -> None:
    from .bench import BenchConfig, run_experiment, write_csv
    from .source import RemoteProfile

    cfg = BenchConfig(Path(args.workdir), seed=args.seed, image_size_bytes=args.image_size, runs=args.runs,
                      remote=RemoteProfile(args.request_latency, args.byte_latency), sleep=args.sleep)
    rows = run_experiment(args.experiment, cfg)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(rows, fh)
        print(f"wrote {len(rows)} rows to {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(write_csv(rows))


# parser


def build_parser() -> argparse.ArgumentParser:
    from .bench import EXPERIMENTS

    parser = argparse.ArgumentParser(prog="obidos", description="Selective hybrid ETL with replicasets.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    client = argparse.ArgumentParser(add_help=False)
    client.add_argument("--url", help=f"instance base url (default $OBIDOS_URL or {DEFAULT_URL})")
    client.add_argument("--key", help="api key (default $OBIDOS_API_KEY)")
    client.add_argument("--config", help="instance config; used to find the url when --url is absent")

    query = argparse.ArgumentParser(add_help=False)
    query.add_argument("--level", help="target granularity level, e.g. series")
    query.add_argument("--where", action="append", type=parse_where, help="predicate such as modality=CT (repeatable)")
    query.add_argument("--binary", action="store_true", help="also load the binary data under matches")

    p = sub.add_parser("generate", help="write a synthetic source tree")
    p.add_argument("root")
    p.add_argument("--counts", default="2,2,2,2,2", help="per-level fan-out, collection to image")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--image-size", type=int, default=512 * 1024)
    p.add_argument("--source-id", default="synthetic")
    p.add_argument("--metadata-padding", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("serve", help="run an instance")
    p.add_argument("--config", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    rs = sub.add_parser("replicaset", help="replicaset CRUD").add_subparsers(dest="action", required=True)
    p = rs.add_parser("create", parents=[client, query])
    p.add_argument("--replica", action="append", required=True, help="source:path, e.g. src1:C1/P2 (repeatable)")
    p.set_defaults(func=cmd_rs_create)
    p = rs.add_parser("get", parents=[client])
    p.add_argument("id")
    p.add_argument("--no-refresh", action="store_true")
    p.set_defaults(func=cmd_rs_get)
    p = rs.add_parser("update", parents=[client])
    p.add_argument("id")
    p.add_argument("--replica", action="append", required=True)
    p.set_defaults(func=cmd_rs_update)
    p = rs.add_parser("delete", parents=[client])
    p.add_argument("id")
    p.set_defaults(func=cmd_rs_delete)

    p = sub.add_parser("query", parents=[client, query], help="run a query over a replicaset")
    p.add_argument("id")
    p.add_argument("--force-load", action="store_true", help="reload every pointer if the answer is incomplete")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("share", parents=[client], help="package a replicaset for another user or instance")
    p.add_argument("id")
    p.add_argument("--receiver", required=True, help="receiving user id")
    p.add_argument("--kind", choices=("id", "full"), default="id")
    p.add_argument("--grant-ttl", type=float, help="attach an access grant valid for this many seconds")
    p.add_argument("--out", help="write the envelope to a file")
    p.add_argument("--to", help="post the envelope to this receiver instance")
    p.add_argument("--to-key", help="receiver-side api key for --to")
    p.set_defaults(func=cmd_share)

    p = sub.add_parser("import-envelope", parents=[client], help="import an envelope file")
    p.add_argument("file")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("materialize", parents=[client], help="load a remotely bound replicaset locally")
    p.add_argument("id")
    p.set_defaults(func=cmd_materialize)

    p = sub.add_parser("gc", parents=[client], help="collect orphaned repository data")
    p.set_defaults(func=cmd_gc)

    p = sub.add_parser("bench", help="run one benchmark experiment and print CSV")
    p.add_argument("experiment", choices=sorted(EXPERIMENTS))
    p.add_argument("--workdir", default="bench-work")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--image-size", type=int, default=8 * 1024)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--request-latency", type=float, default=0.020)
    p.add_argument("--byte-latency", type=float, default=10e-9)
    p.add_argument("--sleep", action="store_true", help="really sleep for remote latency instead of simulating it")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ObidosError, OSError, ValueError) as exc:
        print(f"obidos: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
