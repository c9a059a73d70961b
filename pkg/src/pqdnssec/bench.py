"""Benchmark matrix: one fresh server process per (algorithm, iteration).

Each iteration starts ``python -m pqdnssec serve`` for one algorithm, waits for its
readiness line, sends warmup queries, then measures every planned query: client
latency, response size and transport, server CPU time across the query, and the
server's peak RSS. Signing time comes from an in-process micro benchmark over the
same signed-data bytes the server signs.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import queue
import shutil
import signal
import statistics
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

from . import algoreg, client
from .keystore import SigningKey, dnskey_rrset, generate_and_store
from .signer import ValidityPolicy, rrsig_signed_data, RrsigRecord, owner_labels
from .wire import Name, RRType, Rrset, a_rdata

log = logging.getLogger(__name__)

DEFAULT_ZONE = "mysig.com."
DEFAULT_ADDRESS = "10.0.0.1"
RECORD_COLUMNS = ("algorithm", "iteration", "sign_time_us", "latency_us", "response_size_bytes",
                  "transport", "cpu_time_us", "peak_rss_bytes")
METRICS = ("sign_time_us", "latency_us", "response_size_bytes", "cpu_time_us", "peak_rss_bytes")
SUMMARY_COLUMNS = ("algorithm", "metric", "mean", "stddev", "min", "max", "count")
PLOT_COLUMNS = ("algorithm", "metric", "value")


class BenchError(Exception):
    pass


class ServerStartError(BenchError):
    pass


@dataclass(frozen=True)
class QuerySpec:
    name: str
    rrtype: int
    do_bit: bool = True

    @property
    def label(self) -> str:
        return RRType.mnemonic(self.rrtype).lower()


def default_queries(zone: str = DEFAULT_ZONE) -> tuple[QuerySpec, ...]:
    return (QuerySpec(zone, RRType.A), QuerySpec(zone, RRType.DNSKEY))


def parse_queries(text: str, zone: str = DEFAULT_ZONE) -> tuple[QuerySpec, ...]:
    """Comma-separated query types, e.g. ``a,dnskey``; all DO=1 at the zone apex."""
    out = [QuerySpec(zone, RRType.parse(t.strip())) for t in text.split(",") if t.strip()]
    if not out:
        raise ValueError("empty query list")
    return tuple(out)


@dataclass
class BenchPlan:
    algorithms: Sequence[str] = field(default_factory=lambda: [d.mnemonic for d in algoreg.registry()])
    iterations: int = 100
    queries: Sequence[QuerySpec] = field(default_factory=default_queries)
    warmup: int = 1
    out: Path | None = None
    settle_ms: float = 35.0
    zone: str = DEFAULT_ZONE
    timeout: float = 10.0
    ready_timeout: float = 60.0
    udp_payload_max: int = 1232

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.queries:
            raise ValueError("query set must not be empty")
        if self.warmup < 0 or self.settle_ms < 0:
            raise ValueError("warmup and settle delay must be >= 0")
        reg = algoreg.default_registry()
        self.algorithms = [reg.get(a).mnemonic for a in self.algorithms]


@dataclass(frozen=True)
class BenchRecord:
    algorithm: str
    iteration: int
    sign_time_us: float | None
    latency_us: float | None
    response_size_bytes: int | None
    transport: str | None
    cpu_time_us: float | None
    peak_rss_bytes: int | None
    query: str = "a"


@dataclass(frozen=True)
class SummaryRow:
    algorithm: str
    metric: str
    mean: float
    stddev: float
    min: float
    max: float
    count: int
    query: str = "a"


# --------------------------------------------------------------------------- OS metrics


def _clock_tick() -> int:
    try:
        return os.sysconf("SC_CLK_TCK")
    except (ValueError, OSError, AttributeError):
        return 100


def process_cpu_ns(pid: int) -> int | None:
    """User+system CPU time of ``pid`` in nanoseconds, or None if the OS does not say.

    Sums per-thread scheduler stats (ns resolution); falls back to the tick-granular
    utime+stime from ``/proc/<pid>/stat``.
    """
    task_dir = Path(f"/proc/{pid}/task")
    try:
        total = 0
        for task in task_dir.iterdir():
            total += int((task / "schedstat").read_text().split()[0])
        return total
    except (OSError, ValueError, IndexError):
        pass
    try:
        stat = Path(f"/proc/{pid}/stat").read_text()
        parts = stat[stat.rindex(")") + 2 :].split()
        ticks = int(parts[11]) + int(parts[12])
        return ticks * 1_000_000_000 // _clock_tick()
    except (OSError, ValueError, IndexError):
        return None


def peak_rss_bytes(pid: int) -> int | None:
    """VmHWM of ``pid``; None where /proc is missing."""
    try:
        for line in Path(f"/proc/{pid}/status").read_text().splitlines():
            if line.startswith("VmHWM:"):
                value, unit = line.split()[1:3]
                return int(value) * (1024 if unit.lower() == "kb" else 1)
    except (OSError, ValueError, IndexError):
        return None
    return None


# --------------------------------------------------------------------------- signing micro benchmark


def zone_rrset(qspec: QuerySpec, key: SigningKey, ttl: int = 3600) -> Rrset:
    name = Name.from_text(qspec.name)
    if qspec.rrtype == RRType.DNSKEY:
        return dnskey_rrset([key], ttl)
    if qspec.rrtype == RRType.A:
        return Rrset.of(name, RRType.A, ttl, [a_rdata(DEFAULT_ADDRESS)])
    raise ValueError(f"no benchmark RRset for type {qspec.label}")


def signed_data_for(rrset: Rrset, key: SigningKey, now: int | None = None,
                    policy: ValidityPolicy = ValidityPolicy()) -> bytes:
    now = int(time.time()) if now is None else now
    prefix = RrsigRecord(rrset.rrtype, key.dnskey.algorithm, owner_labels(rrset.name), rrset.ttl,
                         now + policy.lifetime, now - policy.backdate, key.key_tag, key.owner)
    return rrsig_signed_data(prefix, rrset)


def micro_sign_bench(alg: str | algoreg.AlgorithmDescriptor, message_size: int | bytes = 256,
                     repetitions: int = 10, keypair: algoreg.KeyPair | None = None) -> list[float]:
    """Per-call sign() time in microseconds over a fixed message.

    ``message_size`` is a length (the message is a fixed byte pattern) or the exact
    bytes to sign, such as a canonical RRSIG signed-data string.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    desc = alg if isinstance(alg, algoreg.AlgorithmDescriptor) else algoreg.lookup(alg)
    if isinstance(message_size, int):
        if message_size < 1:
            raise ValueError("message_size must be >= 1")
        message = bytes(i & 0xFF for i in range(message_size))
    else:
        message = bytes(message_size)
    keypair = keypair or algoreg.generate_keypair(desc)
    out = []
    for _ in range(repetitions):
        start = time.perf_counter_ns()
        algoreg.sign(keypair, message)
        out.append((time.perf_counter_ns() - start) / 1000.0)
    return out


# --------------------------------------------------------------------------- server processes


def write_zone_config(directory: Path, key: SigningKey, key_paths: tuple[Path, Path],
                      zone: str = DEFAULT_ZONE, udp_payload_max: int = 1232) -> Path:
    records = directory / "zone.txt"
    records.write_text(f"{zone} 3600 IN A {DEFAULT_ADDRESS}\n")
    cfg = {
        "listen": "127.0.0.1",
        "port": 0,
        "udp_payload_max": udp_payload_max,
        "zones": [{
            "apex": zone,
            "algorithm": key.algorithm.mnemonic,
            "records": str(records),
            "keys": [{"public": str(key_paths[0]), "private": str(key_paths[1])}],
        }],
    }
    path = directory / "server.yaml"
    path.write_text(json.dumps(cfg, indent=2))  # JSON is valid YAML
    return path


class ServerProcess:
    """A ``pqdnssec serve`` child; ``start`` returns once it prints its readiness line."""

    def __init__(self, config: Path, ready_timeout: float = 60.0):
        self.config = config
        self.ready_timeout = ready_timeout
        self.proc: subprocess.Popen | None = None
        self.address: tuple[str, int] | None = None
        self._stderr = tempfile.TemporaryFile()

    @property
    def pid(self) -> int:
        return self.proc.pid

    def start(self) -> tuple[str, int]:
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "pqdnssec", "serve", "--config", str(self.config)],
            stdout=subprocess.PIPE, stderr=self._stderr, stdin=subprocess.DEVNULL, text=True, env=env,
        )
        lines: queue.Queue = queue.Queue()

        def pump(stream):
            for line in stream:
                lines.put(line)
            lines.put(None)

        threading.Thread(target=pump, args=(self.proc.stdout,), daemon=True).start()
        deadline = time.monotonic() + self.ready_timeout
        while True:
            try:
                line = lines.get(timeout=max(deadline - time.monotonic(), 0.01))
            except queue.Empty:
                self.stop()
                raise ServerStartError(f"server not ready after {self.ready_timeout:.0f}s") from None
            if line is None:
                code = self.proc.wait()
                raise ServerStartError(f"server exited with {code} before ready: {self.stderr_text()}")
            if line.startswith("ready "):
                udp = dict(part.split("=", 1) for part in line.split()[1:])["udp"]
                host, port = udp.rsplit(":", 1)
                self.address = (host, int(port))
                return self.address

    def stderr_text(self) -> str:
        self._stderr.seek(0)
        return self._stderr.read().decode(errors="replace").strip()

    def stop(self, timeout: float = 10.0) -> int | None:
        if self.proc is None:
            return None
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        self._stderr.close()
        return self.proc.returncode

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()


# --------------------------------------------------------------------------- the matrix


@dataclass
class RunLog:
    """Per-iteration bookkeeping written next to the CSVs as ``run.json``."""

    iterations: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)


def _measure(plan: BenchPlan, key: SigningKey, server: ServerProcess, iteration: int) -> list[BenchRecord]:
    alg = key.algorithm.mnemonic
    for i in range(plan.warmup):
        qspec = plan.queries[i % len(plan.queries)]
        client.query(server.address, qspec.name, qspec.rrtype, do_bit=False, timeout=plan.timeout)
    records = []
    for qspec in plan.queries:
        cpu0 = process_cpu_ns(server.pid)
        result = client.query(server.address, qspec.name, qspec.rrtype, do_bit=qspec.do_bit, timeout=plan.timeout)
        cpu1 = process_cpu_ns(server.pid)
        rss = peak_rss_bytes(server.pid)
        cpu_us = (cpu1 - cpu0) / 1000.0 if cpu0 is not None and cpu1 is not None else None
        try:
            data = signed_data_for(zone_rrset(qspec, key), key)
            sign_us = micro_sign_bench(key.algorithm, data, 1, key.keypair)[0] if qspec.do_bit else None
        except ValueError:
            sign_us = None
        records.append(BenchRecord(alg, iteration, sign_us, result.latency_us, result.wire_size,
                                   result.transport_used, cpu_us, rss, qspec.label))
    return records


def run_matrix(plan: BenchPlan, workdir: str | os.PathLike | None = None,
               run_log: RunLog | None = None) -> list[BenchRecord]:
    owned = workdir is None
    base = Path(tempfile.mkdtemp(prefix="pqdnssec-bench-")) if owned else Path(workdir)
    run_log = run_log if run_log is not None else RunLog()
    records: list[BenchRecord] = []
    try:
        for mnemonic in plan.algorithms:
            alg_dir = base / mnemonic
            alg_dir.mkdir(parents=True, exist_ok=True)
            key = generate_and_store(mnemonic, plan.zone, alg_dir)
            base_name = key.basename()
            paths = (alg_dir / f"{base_name}.key", alg_dir / f"{base_name}.private")
            config = write_zone_config(alg_dir, key, paths, plan.zone, plan.udp_payload_max)
            for iteration in range(plan.iterations):
                started = time.monotonic()
                server = ServerProcess(config, plan.ready_timeout)
                try:
                    server.start()
                    time.sleep(plan.settle_ms / 1000.0)
                    batch = _measure(plan, key, server, iteration)
                except (ServerStartError, client.QueryError) as exc:
                    log.warning("%s iteration %d skipped: %s", mnemonic, iteration, exc)
                    run_log.skipped.append({"algorithm": mnemonic, "iteration": iteration, "reason": str(exc)})
                    server.stop()
                    continue
                pid = server.pid
                code = server.stop()
                wall_us = (time.monotonic() - started) * 1e6
                records.extend(batch)
                run_log.iterations.append({"algorithm": mnemonic, "iteration": iteration, "server_pid": pid,
                                           "exit_code": code, "wall_us": wall_us})
                log.info("%s iteration %d done (pid %d)", mnemonic, iteration, pid)
    finally:
        if owned:
            shutil.rmtree(base, ignore_errors=True)
    return records


# --------------------------------------------------------------------------- statistics and CSV


def _series(records: Iterable[BenchRecord]) -> dict[tuple[str, str, str], list[float]]:
    groups: dict[tuple[str, str, str], list[float]] = {}
    for r in records:
        for metric in METRICS:
            value = getattr(r, metric)
            bucket = groups.setdefault((r.algorithm, r.query, metric), [])
            if value is not None:
                bucket.append(float(value))
    return groups


def summarize(records: Sequence[BenchRecord]) -> list[SummaryRow]:
    """Mean, sample stddev, min and max per (algorithm, query, metric); absent values are skipped."""
    if not records:
        raise ValueError("no records to summarize")
    rows = []
    for (alg, q, metric), values in _series(records).items():
        if not values:
            continue
        sd = statistics.stdev(values) if len(values) > 1 else 0.0
        rows.append(SummaryRow(alg, metric, statistics.fmean(values), sd, min(values), max(values), len(values), q))
    return rows


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def emit_csv(items: Sequence[BenchRecord] | Sequence[SummaryRow], path: str | os.PathLike) -> Path:
    """Write records or summary rows to ``path`` (header only when empty)."""
    items = list(items)
    if items and isinstance(items[0], SummaryRow):
        return _write_csv(Path(path), SUMMARY_COLUMNS,
                          ([getattr(r, c) for c in SUMMARY_COLUMNS] for r in items))
    return _write_csv(Path(path), RECORD_COLUMNS, ([getattr(r, c) for c in RECORD_COLUMNS] for r in items))


def emit_plotdata(records: Sequence[BenchRecord], path: str | os.PathLike) -> Path:
    def rows():
        for r in records:
            for metric in METRICS:
                value = getattr(r, metric)
                if value is not None:
                    yield r.algorithm, metric, value
    return _write_csv(Path(path), PLOT_COLUMNS, rows())


def _parse_num(text: str, kind):
    return None if text == "" else kind(text)


def read_records(path: str | os.PathLike, query: str = "a") -> list[BenchRecord]:
    """Parse a records file; the query label is not a column, so the caller supplies it."""
    types = {f.name: f.type for f in fields(BenchRecord)}
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for name in RECORD_COLUMNS:
                text = row[name]
                t = types[name]
                if name == "iteration":
                    kw[name] = int(text)
                elif "int" in t:
                    kw[name] = _parse_num(text, int)
                elif "float" in t:
                    kw[name] = _parse_num(text, float)
                else:
                    kw[name] = text if text != "" or name == "algorithm" else None
            out.append(BenchRecord(**kw, query=query))
    return out


def write_outputs(records: Sequence[BenchRecord], out: str | os.PathLike, plan: BenchPlan | None = None,
                  run_log: RunLog | None = None) -> dict[str, Path]:
    """Write ``records.csv`` for every query plus ``<query>/{records,summary,plotdata}.csv``.

    The column sets are fixed, so the query type lives in the directory name (and in
    ``run.json``, one label per row of the combined file) instead of an extra column.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"records": emit_csv(records, out / "records.csv")}
    labels = [q.label for q in plan.queries] if plan is not None else []
    labels += sorted({r.query for r in records} - set(labels))
    for label in labels:
        subset = [r for r in records if r.query == label]
        sub = out / label
        paths[f"{label}/records"] = emit_csv(subset, sub / "records.csv")
        paths[f"{label}/summary"] = _write_csv(sub / "summary.csv", SUMMARY_COLUMNS,
                                               ([getattr(r, c) for c in SUMMARY_COLUMNS] for r in summarize(subset))
                                               if subset else [])
        paths[f"{label}/plotdata"] = emit_plotdata(subset, sub / "plotdata.csv")
    meta = {
        "host": {"machine": platform.machine(), "system": platform.system(), "python": platform.python_version(),
                 "cpus": os.cpu_count()},
        "plan": None if plan is None else {
            "algorithms": list(plan.algorithms), "iterations": plan.iterations, "warmup": plan.warmup,
            "settle_ms": plan.settle_ms, "queries": [asdict(q) for q in plan.queries],
        },
        "record_queries": [r.query for r in records],
        "iterations": run_log.iterations if run_log else [],
        "skipped": run_log.skipped if run_log else [],
    }
    paths["run"] = out / "run.json"
    paths["run"].write_text(json.dumps(meta, indent=2))
    return paths
