"""Command line: ``pqdnssec {keygen,serve,resolve,bench,algorithms}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import algoreg


def _cmd_keygen(args) -> int:
    from .keystore import generate_and_store

    try:
        key = generate_and_store(args.algorithm, args.zone, args.out, flags=args.flags)
    except algoreg.UnknownAlgorithm as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot write keys to {args.out}: {exc}", file=sys.stderr)
        return 1
    print(Path(args.out) / key.basename())
    return 0


def _cmd_serve(args) -> int:
    from .server import ConfigError, load_config, run

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run(config)


def _cmd_resolve(args) -> int:
    from . import client

    try:
        opts = client.parse_dig_args(args.args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        result = client.query(opts.server, opts.name, opts.rrtype, do_bit=opts.dnssec,
                              bufsize=opts.bufsize, force_tcp=opts.tcp, timeout=args.timeout)
    except client.QueryError as exc:
        print(f";; {exc}", file=sys.stderr)
        return 9
    report = None
    if args.trust_anchor:
        report = client.validate_response(result, client.load_trust_anchors(args.trust_anchor),
                                          self_validate_dnskey=args.self_validate)
    if args.json:
        print(client.result_to_json(result, report))
    else:
        sys.stdout.write(client.print_result(result, report))
    return 0 if report is None or report.overall else 1


def _cmd_bench(args) -> int:
    from . import bench

    algs = [d.mnemonic for d in algoreg.registry()] if args.algorithms == "all" else args.algorithms.split(",")
    try:
        plan = bench.BenchPlan(algorithms=algs, iterations=args.iterations,
                               queries=bench.parse_queries(args.queries), warmup=args.warmup,
                               out=Path(args.out), settle_ms=args.settle_ms)
    except (ValueError, algoreg.UnknownAlgorithm) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run_log = bench.RunLog()
    records = bench.run_matrix(plan, run_log=run_log)
    paths = bench.write_outputs(records, plan.out, plan, run_log)
    for name, path in paths.items():
        print(f"{name}: {path}")
    if run_log.skipped:
        print(f"warning: {len(run_log.skipped)} iterations skipped (see run.json)", file=sys.stderr)
    return 0


def _cmd_algorithms(args) -> int:
    print(f"{'mnemonic':<18} {'code':>4} {'pub':>5} {'priv':>5} {'sig':>6}  family")
    for d in algoreg.registry():
        priv = "-" if d.private_key_len is None else d.private_key_len
        sig = f"<={d.signature_len}" if d.signature_len_is_max else d.signature_len
        print(f"{d.mnemonic:<18} {d.code:>4} {d.public_key_len:>5} {priv:>5} {sig:>6}  {d.family.value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pqdnssec", description="Post-quantum DNSSEC signing server and tools")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", help="generate a zone signing key pair")
    k.add_argument("--algorithm", required=True, help="mnemonic, e.g. MLDSA44")
    k.add_argument("--zone", required=True)
    k.add_argument("--out", required=True, help="directory for the .key/.private files")
    k.add_argument("--flags", type=int, default=257)
    k.set_defaults(func=_cmd_keygen)

    s = sub.add_parser("serve", help="run the authoritative server")
    s.add_argument("--config", required=True)
    s.set_defaults(func=_cmd_serve)

    r = sub.add_parser("resolve", help="dig-style query with optional validation",
                       usage="%(prog)s <name> [<type>] @<server:port> [+dnssec] [+tcp] [+bufsize=N] "
                             "[--trust-anchor PATH] [--json]")
    r.add_argument("args", nargs="+", metavar="ARG")
    r.add_argument("--trust-anchor")
    r.add_argument("--self-validate", action="store_true", help="let a DNSKEY RRset vouch for itself")
    r.add_argument("--json", action="store_true")
    r.add_argument("--timeout", type=float, default=5.0)
    r.set_defaults(func=_cmd_resolve)

    b = sub.add_parser("bench", help="run the benchmark matrix")
    b.add_argument("--algorithms", default="all", help="comma-separated mnemonics or 'all'")
    b.add_argument("--iterations", type=int, default=100)
    b.add_argument("--out", required=True)
    b.add_argument("--queries", default="a,dnskey")
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--settle-ms", type=float, default=35.0)
    b.set_defaults(func=_cmd_bench)

    a = sub.add_parser("algorithms", help="list registry algorithms")
    a.set_defaults(func=_cmd_algorithms)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
