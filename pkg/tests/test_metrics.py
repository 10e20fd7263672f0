import hashlib

import pytest

from gridrepl import metrics
from gridrepl.activities import GridSimulation
from gridrepl.metrics import DuplicateFlow, FlowLog, FlowRecord, bin_link_usage, fmt, summarize
from gridrepl.scenario import ScenarioConfig


def rec(fid, start, end, dst="T1-EU1", cls="DST", opened=None):
    return FlowRecord(fid, f"F{fid}", cls, "production", "T0", dst, 1e8,
                      start if opened is None else opened, start, end)


def test_record_flow_times():
    log = FlowLog()
    log.record(rec(1, 0.0, 30.0))
    log.record(rec(2, 5.0, 35.0, opened=0.0))
    assert log.records[0].transfer_time == 30.0
    assert log.records[1].queue_wait == 5.0


def test_duplicate_flow_rejected():
    log = FlowLog()
    log.record(rec(1, 0.0, 1.0))
    with pytest.raises(DuplicateFlow):
        log.record(rec(1, 0.0, 1.0))


def test_log_order():
    log = FlowLog()
    for r in (rec(3, 0, 5), rec(1, 0, 5), rec(2, 0, 2)):
        log.record(r)
    assert [r.flow_id for r in log.records] == [2, 1, 3]


def test_record_invariants():
    with pytest.raises(ValueError):
        rec(1, 5.0, 4.0)


def test_full_bin():
    (b,) = bin_link_usage([("L", "A->B", 1.25e9, [(0.0, 1.25e8)])], 60.0, 60.0)
    assert b.utilization == pytest.approx(0.10)
    assert b.bytes == pytest.approx(1.25e8 * 60)


def test_half_bin():
    hist = [(0.0, 0.0), (15.0, 1.25e8), (45.0, 0.0)]
    (b,) = bin_link_usage([("L", "A->B", 1.25e9, hist)], 60.0, 60.0)
    # oracle: integral of the step function = 1.25e8 * 30
    assert b.bytes == pytest.approx(metrics.integrate(hist, 0, 60))
    assert b.utilization == pytest.approx(0.05)


def test_idle_link():
    bins = bin_link_usage([("L", "A->B", 1e9, [(0.0, 0.0)])], 60.0, 180.0)
    assert [b.utilization for b in bins] == [0.0, 0.0, 0.0]


def test_bins_cover_duration_with_short_tail():
    bins = bin_link_usage([("L", "A->B", 10.0, [(0.0, 5.0)])], 60.0, 150.0)
    assert [b.bin_start for b in bins] == [0.0, 60.0, 120.0]
    assert bins[-1].bytes == pytest.approx(150.0) and bins[-1].utilization == pytest.approx(0.5)


def test_summary_stats():
    rows = summarize([rec(1, 0, 10), rec(2, 0, 20), rec(3, 0, 30)])
    first = rows[0]
    assert (first["count"], first["mean"], first["median"]) == (3, 20.0, 20.0)


def test_all_row_is_count_weighted():
    recs = [rec(1, 0, 10, "A"), rec(2, 0, 20, "A"), rec(3, 0, 60, "B")]
    rows = {r["dst"]: r for r in summarize(recs)}
    weighted = (rows["A"]["mean"] * rows["A"]["count"] + rows["B"]["mean"] * rows["B"]["count"]) / 3
    assert rows["all"]["mean"] == pytest.approx(weighted)
    assert rows["all"]["count"] == rows["A"]["count"] + rows["B"]["count"]


def test_empty_group_absent():
    rows = summarize([rec(1, 0, 10, cls="DST")])
    assert all(r["class"] != "RAW" for r in rows)
    assert summarize([]) == []


@pytest.mark.parametrize("x,s", [(2e9, "2000000000"), (0.5, "0.5"), (1 / 3, "0.333333333"),
                                 (12345678912.0, "12345678900"), (0.0, "0"), (7, "7")])
def test_number_format(x, s):
    assert fmt(x) == s


@pytest.fixture(scope="module")
def small_run():
    return GridSimulation(ScenarioConfig(seed=3, duration=2 * 3600.0, metric_bin=300.0)).run()


def test_csv_headers(small_run, tmp_path):
    metrics.write_outputs(small_run, tmp_path)
    assert (tmp_path / "flows.csv").read_text().splitlines()[0] == \
        "flow_id,file_id,class,activity,src,dst,bytes,opened_at,started_at,completed_at"
    assert (tmp_path / "link_usage.csv").read_text().splitlines()[0] == "bin_start,link,direction,bytes,utilization"
    assert "e+" not in (tmp_path / "flows.csv").read_text()


def test_exports_are_byte_identical(tmp_path):
    digests = []
    for k in range(2):
        sim = GridSimulation(ScenarioConfig(seed=3, duration=1800.0)).run()
        out = tmp_path / str(k)
        metrics.write_outputs(sim, out)
        digests.append({p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())})
    assert digests[0] == digests[1]


def test_link_byte_consistency(small_run):
    net = small_run.net
    T = small_run.config.duration
    bins = metrics.link_usage(small_run)
    expected = [0.0] * len(net.dlinks)
    for f in net.completed + list(net.flows.values()):
        for i in f.dlinks:
            expected[i] += f.bytes_done
    for i, hop in enumerate(net.dlinks):
        got = sum(b.bytes for b in bins if b.direction == hop.direction)
        assert got == pytest.approx(expected[i], rel=1e-6, abs=1.0)


def test_utilization_bounded(small_run):
    assert all(0.0 <= b.utilization <= 1 + 1e-9 for b in metrics.link_usage(small_run))


def test_summary_counts_match_log(small_run):
    rows = summarize(small_run.flow_log.records)
    for cls in ("RAW", "DST"):
        per_dst = sum(r["count"] for r in rows if r["class"] == cls and r["dst"] != "all")
        assert per_dst == sum(1 for r in small_run.flow_log.records if r.cls == cls)


def test_io_failure(tmp_path):
    with pytest.raises(metrics.IoFailure):
        metrics.export_csv([], ("a",), tmp_path / "missing" / "x.csv")
