import csv
import json
import os
import statistics
import time

import pytest
from hypothesis import given, strategies as st

from pqdnssec import bench
from pqdnssec.bench import (
    PLOT_COLUMNS, RECORD_COLUMNS, SUMMARY_COLUMNS, BenchPlan, BenchRecord, QuerySpec, RunLog, emit_csv,
    emit_plotdata, micro_sign_bench, read_records, run_matrix, summarize, write_outputs,
)
from pqdnssec.wire import RRType


def rec(alg="ED25519", it=0, sign=1.0, lat=2.0, size=100, transport="udp", cpu=3.0, rss=4096, query="a"):
    return BenchRecord(alg, it, sign, lat, size, transport, cpu, rss, query)


def _row(rows, alg, metric, query="a"):
    return next(r for r in rows if (r.algorithm, r.metric, r.query) == (alg, metric, query))


def test_summarize_constant_series():
    rows = summarize([rec(size=5, it=i) for i in range(3)])
    r = _row(rows, "ED25519", "response_size_bytes")
    assert (r.mean, r.stddev, r.min, r.max, r.count) == (5, 0, 5, 5, 3)


def test_summarize_sample_stddev():
    rows = summarize([rec(lat=v) for v in (1.0, 2.0, 3.0)])
    r = _row(rows, "ED25519", "latency_us")
    assert r.mean == 2.0 and r.stddev == pytest.approx(1.0)


def test_summarize_single_value_and_grouping():
    rows = summarize([rec("ED25519", sign=1.0), rec("MLDSA44", sign=9.0), rec("MLDSA44", query="dnskey", sign=7.0)])
    assert _row(rows, "ED25519", "sign_time_us").stddev == 0.0
    assert _row(rows, "MLDSA44", "sign_time_us").mean == 9.0
    assert _row(rows, "MLDSA44", "sign_time_us", "dnskey").mean == 7.0


def test_summarize_skips_absent_values():
    rows = summarize([rec(cpu=None, rss=None), rec(cpu=None, rss=None)])
    assert not [r for r in rows if r.metric in ("cpu_time_us", "peak_rss_bytes")]
    assert _row(rows, "ED25519", "latency_us").count == 2


def test_summarize_empty_rejected():
    with pytest.raises(ValueError):
        summarize([])


@given(st.lists(st.floats(0, 1e9, allow_nan=False), min_size=1, max_size=40))
def test_summary_matches_statistics_module(values):
    rows = summarize([rec(lat=v, it=i) for i, v in enumerate(values)])
    r = _row(rows, "ED25519", "latency_us")
    assert r.mean == pytest.approx(statistics.fmean(values))
    assert r.stddev == pytest.approx(statistics.stdev(values) if len(values) > 1 else 0.0, abs=1e-6)
    assert r.min == min(values) and r.max == max(values)


def test_emit_csv_header_only(tmp_path):
    path = emit_csv([], tmp_path / "r.csv")
    assert path.read_text().strip() == ",".join(RECORD_COLUMNS)
    assert read_records(path) == []


def test_emit_csv_round_trip_and_empty_cells(tmp_path):
    records = [rec(), rec(it=1, sign=None, cpu=None, rss=None, transport="tcp")]
    path = emit_csv(records, tmp_path / "r.csv")
    assert read_records(path) == records
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert rows[1]["sign_time_us"] == "" and rows[1]["cpu_time_us"] == "" and rows[1]["peak_rss_bytes"] == ""
    assert rows[1]["transport"] == "tcp"


@given(st.lists(st.builds(
    BenchRecord, st.sampled_from(["ED25519", "MLDSA44"]), st.integers(0, 99),
    st.none() | st.floats(0, 1e7, allow_nan=False), st.none() | st.floats(0, 1e7, allow_nan=False),
    st.none() | st.integers(0, 65535), st.sampled_from(["udp", "tcp"]),
    st.none() | st.floats(0, 1e7, allow_nan=False), st.none() | st.integers(0, 2**40), st.just("dnskey"),
), max_size=10))
def test_csv_round_trip_property(tmp_path_factory, records):
    path = emit_csv(records, tmp_path_factory.mktemp("csv") / "r.csv")
    assert read_records(path, query="dnskey") == records


def test_csv_headers_are_exact(tmp_path):
    assert RECORD_COLUMNS == ("algorithm", "iteration", "sign_time_us", "latency_us", "response_size_bytes",
                              "transport", "cpu_time_us", "peak_rss_bytes")
    assert SUMMARY_COLUMNS == ("algorithm", "metric", "mean", "stddev", "min", "max", "count")
    assert PLOT_COLUMNS == ("algorithm", "metric", "value")


def test_summary_and_plot_schemas(tmp_path):
    records = [rec(), rec(it=1, cpu=None)]
    emit_csv(summarize(records), tmp_path / "s.csv")
    emit_plotdata(records, tmp_path / "p.csv")
    with (tmp_path / "s.csv").open() as fh:
        assert tuple(next(csv.reader(fh))) == SUMMARY_COLUMNS
    with (tmp_path / "p.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == PLOT_COLUMNS
    assert len(rows) - 1 == 5 + 4  # the absent cpu value is left out


def test_micro_sign_bench():
    times = micro_sign_bench("MLDSA44", 256, 1)
    assert len(times) == 1 and times[0] > 0
    assert len(micro_sign_bench("ED25519", b"abc", 3)) == 3
    with pytest.raises(ValueError):
        micro_sign_bench("ED25519", 256, 0)
    with pytest.raises(ValueError):
        micro_sign_bench("ED25519", 0, 1)


def test_plan_validation():
    assert len(BenchPlan().algorithms) == 18
    assert BenchPlan(algorithms=["ml-dsa-44"]).algorithms == ["MLDSA44"]
    with pytest.raises(ValueError):
        BenchPlan(iterations=0)
    with pytest.raises(ValueError):
        BenchPlan(queries=())
    with pytest.raises(KeyError):
        BenchPlan(algorithms=["NOPE"])
    assert [q.rrtype for q in bench.parse_queries("a, dnskey")] == [RRType.A, RRType.DNSKEY]
    with pytest.raises(ValueError):
        bench.parse_queries(",")


def test_proc_helpers_on_self():
    pid = os.getpid()
    before = bench.process_cpu_ns(pid)
    end = time.process_time() + 0.05
    while time.process_time() < end:
        pass
    after = bench.process_cpu_ns(pid)
    assert before is not None and after - before >= 30_000_000
    assert bench.peak_rss_bytes(pid) > 1 << 20


def test_proc_helpers_absent_pid():
    assert bench.process_cpu_ns(2**22 + 12345) is None
    assert bench.peak_rss_bytes(2**22 + 12345) is None


def test_run_matrix_one_iteration(tmp_path):
    plan = BenchPlan(algorithms=["ED25519"], iterations=2, settle_ms=0)
    log = RunLog()
    records = run_matrix(plan, tmp_path / "work", log)
    assert len(records) == 2 * len(plan.queries)
    assert {r.query for r in records} == {"a", "dnskey"}
    assert all(r.transport == "udp" for r in records)
    pids = [it["server_pid"] for it in log.iterations]
    assert len(set(pids)) == 2 and all(it["exit_code"] == 0 for it in log.iterations)
    for r in records:
        assert r.cpu_time_us is not None and r.cpu_time_us >= 0
        assert r.peak_rss_bytes > 0 and r.sign_time_us > 0
        assert r.cpu_time_us <= r.latency_us * 1.5 + 2000  # the server cannot burn more than wall time
    paths = write_outputs(records, tmp_path / "out", plan, log)
    assert len(read_records(paths["records"])) == len(records)
    for label in ("a", "dnskey"):
        assert read_records(paths[f"{label}/records"], query=label) == [r for r in records if r.query == label]
        with paths[f"{label}/summary"].open() as fh:
            rows = list(csv.DictReader(fh))
        assert {r["count"] for r in rows if r["metric"] == "latency_us"} == {"2"}
    meta = json.loads(paths["run"].read_text())
    assert meta["plan"]["iterations"] == 2 and len(meta["iterations"]) == 2
    assert meta["record_queries"] == [r.query for r in records]


def test_absent_metrics_stay_blank_end_to_end(tmp_path, monkeypatch):
    monkeypatch.setattr(bench, "process_cpu_ns", lambda pid: None)
    monkeypatch.setattr(bench, "peak_rss_bytes", lambda pid: None)
    plan = BenchPlan(algorithms=["ED25519"], iterations=1, settle_ms=0, queries=bench.parse_queries("a"))
    records = run_matrix(plan, tmp_path / "work")
    assert len(records) == 1 and records[0].cpu_time_us is None and records[0].peak_rss_bytes is None
    paths = write_outputs(records, tmp_path / "out", plan)
    with paths["records"].open() as fh:
        row = next(csv.DictReader(fh))
    assert row["cpu_time_us"] == "" and row["peak_rss_bytes"] == ""
    with paths["a/plotdata"].open() as fh:
        assert {r["metric"] for r in csv.DictReader(fh)} == {"sign_time_us", "latency_us", "response_size_bytes"}


def test_run_matrix_records_skipped_start(tmp_path, monkeypatch):
    def broken(self):
        raise bench.ServerStartError("boom")

    monkeypatch.setattr(bench.ServerProcess, "start", broken)
    log = RunLog()
    assert run_matrix(BenchPlan(algorithms=["ED25519"], iterations=1), tmp_path, log) == []
    assert log.skipped == [{"algorithm": "ED25519", "iteration": 0, "reason": "boom"}]


def test_query_spec_label():
    assert QuerySpec("mysig.com.", RRType.DNSKEY).label == "dnskey"
