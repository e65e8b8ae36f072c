import io
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cryptocatch.flows import (
    FlowKey,
    PacketRecord,
    RecordError,
    Window,
    length_distribution,
    parse_records,
    read_windows,
    segment_flows,
    write_windows,
)

LINE = '{"ts":1.0,"src_ip":"10.0.0.2","src_port":50000,"dst_ip":"1.2.3.4","dst_port":3333,"proto":"TCP","len":110}'
CSV = "ts,src_ip,src_port,dst_ip,dst_port,proto,len\n1.5,10.0.0.2,50000,1.2.3.4,3333,TCP,80\n"


def test_parse_ndjson_line():
    res = parse_records(LINE + "\n")
    assert len(res) == 1 and res.error_count == 0
    rec = res[0]
    assert rec.len == 110 and rec.dst_port == 3333 and rec.proto == "TCP"


def test_parse_csv_line():
    res = parse_records(CSV, fmt="csv")
    assert res[0].ts == 1.5 and res[0].len == 80


def test_lenient_skips_and_counts():
    res = parse_records(f"{LINE}\nnot json\n{LINE}\n".encode())
    assert len(res) == 2
    assert res.error_count == 1 and res.errors[0][0] == 2


def test_strict_aborts():
    with pytest.raises(RecordError):
        parse_records("not json\n", strict=True)


def test_empty_stream():
    assert len(parse_records("")) == 0
    assert len(parse_records(b"", fmt="csv")) == 0


@pytest.mark.parametrize(
    "patch",
    [{"len": -1}, {"src_port": 70000}, {"ts": -3}, {"proto": "ICMP"}, {"dst_ip": "nope"}, {"len": 1.5}],
)
def test_invalid_fields_rejected(patch):
    obj = json.loads(LINE)
    obj.update(patch)
    res = parse_records(json.dumps(obj))
    assert len(res) == 0 and res.error_count == 1


def test_csv_bad_header():
    with pytest.raises(RecordError):
        parse_records("a,b\n1,2\n", fmt="csv")


def test_parse_file_objects():
    res = parse_records(io.BytesIO(((LINE + "\n") * 3).encode()))
    assert len(res) == 3


def recs(n, key=("10.0.0.2", 50000, "1.2.3.4", 3333), start=0.0, step=1.0):
    src, sport, dst, dport = key
    return [PacketRecord(start + i * step, src, sport, dst, dport, "TCP", 100 + i) for i in range(n)]


@pytest.mark.parametrize("n,sizes", [(23, [10, 10, 3]), (11, [10]), (10, [10]), (1, []), (2, [2])])
def test_segment_sizes(n, sizes):
    windows = segment_flows(recs(n))
    assert [len(w.packets) for w in windows] == sizes
    assert [w.seq_index for w in windows] == list(range(len(sizes)))


def test_timeout_starts_new_instance():
    a = recs(5)
    b = recs(5, start=500.0)
    windows = segment_flows(a + b, flow_timeout=120)
    assert [len(w.packets) for w in windows] == [5, 5]
    assert windows[0].packets[-1][0] == 4.0 and windows[1].packets[0][0] == 500.0


def test_directional_keys():
    fwd = recs(4)
    rev = [PacketRecord(r.ts, r.dst_ip, r.dst_port, r.src_ip, r.src_port, "TCP", r.len) for r in fwd]
    windows = segment_flows(fwd + rev)
    assert len(windows) == 2 and windows[0].key != windows[1].key


def test_unsorted_input_ordered_by_ts_with_stable_ties():
    key = ("10.0.0.2", 50000, "1.2.3.4", 3333)
    rs = [
        PacketRecord(2.0, *key[:2], *key[2:], "TCP", 1),
        PacketRecord(1.0, *key[:2], *key[2:], "TCP", 2),
        PacketRecord(2.0, *key[:2], *key[2:], "TCP", 3),
    ]
    (w,) = segment_flows(rs)
    assert [n for _, n in w.packets] == [2, 1, 3]


def test_labels_attached():
    rs = recs(12)
    key = rs[0].key
    windows = segment_flows(rs, labels={key: "XMR"})
    assert {w.label for w in windows} == {"XMR"}


packet = st.tuples(
    st.integers(0, 3),  # flow id
    st.floats(0, 1000, allow_nan=False),
    st.integers(0, 1500),
)


@given(st.lists(packet, max_size=80), st.integers(2, 12), st.sampled_from([5.0, 120.0]))
def test_segmentation_invariants(pkts, size, timeout):
    records = [PacketRecord(ts, "10.0.0.1", 1000 + f, "1.1.1.1", 443, "TCP", n) for f, ts, n in pkts]
    windows = segment_flows(records, window_size=size, flow_timeout=timeout)
    assert windows == segment_flows(records, window_size=size, flow_timeout=timeout)
    for w in windows:
        assert 2 <= len(w.packets) <= size
        ts = [t for t, _ in w.packets]
        assert ts == sorted(ts)
        # never straddles a timeout gap
        assert all(b - a <= timeout for a, b in zip(ts, ts[1:]))
    # conservation: windowed packets + dropped singletons == total
    for fid in {f for f, _, _ in pkts}:
        total = sum(1 for f, _, _ in pkts if f == fid)
        in_windows = sum(len(w.packets) for w in windows if w.key.src_port == 1000 + fid)
        ts = sorted(t for f, t, _ in pkts if f == fid)
        instances, run = [], 1
        for a, b in zip(ts, ts[1:]):
            if b - a > timeout:
                instances.append(run)
                run = 0
            run += 1
        instances.append(run)
        singles = sum(1 for m in instances if m % size == 1)
        assert in_windows + singles == total


def test_length_distribution():
    key = FlowKey("10.0.0.2", 1, "1.2.3.4", 2, "TCP")
    w = Window(key, 0, ((0, 107), (1, 107)))
    assert length_distribution([w], [(105, 110)]) == [1.0]
    w2 = Window(key, 0, ((0, 36), (1, 80), (2, 107), (3, 200)))
    assert length_distribution([w2], [(36, 80), (105, 110)]) == [0.5, 0.25]
    assert length_distribution([], [(1, 2)]) == [0.0]
    with pytest.raises(ValueError):
        length_distribution([w], [(5, 1)])


def test_windows_file_round_trip():
    windows = segment_flows(recs(23), labels=None)
    buf = io.StringIO()
    write_windows(windows, buf)
    buf.seek(0)
    assert read_windows(buf) == windows
    assert windows[0].window_id == "TCP|10.0.0.2|50000|1.2.3.4|3333|0"
    assert FlowKey.parse(str(windows[0].key)) == windows[0].key
