"""Quick end-to-end check of the Python bindings."""

import math
import pathlib

import mcomm_py as m

TOPOLOGIES = pathlib.Path(__file__).resolve().parents[2] / "core" / "topologies"


def messages(backend):
    rt = m.Runtime(backend, record_transitions=True)
    a, b = rt.node_init(1, 1), rt.node_init(1, 2)
    src, dst = rt.create_endpoint(a, 10), rt.create_endpoint(b, 20)
    # A send completes once the receiver has taken the message.
    sends = [rt.msg_send(src, dst, b"hello %d" % txid, priority=1, txid=txid) for txid in range(1, 4)]
    assert rt.wait(sends[0], timeout=0)["status"] == "pending"
    got = [rt.wait(rt.msg_recv(dst)) for _ in range(3)]
    assert all(rt.wait(s)["status"] == "completed" for s in sends)
    assert [g["txid"] for g in got] == [1, 2, 3]
    assert got[2]["payload"] == b"hello 3"

    pending = rt.msg_recv(dst)
    assert rt.cancel(pending) == "cancelled"
    assert rt.cancel(pending) == "too_late"

    pkt = rt.channel_open("packet", rt.create_endpoint(a, 11), rt.create_endpoint(b, 21))
    sent = rt.pkt_send(pkt, b"\x01\x02\x03")
    assert rt.wait(rt.pkt_recv(pkt))["payload"] == b"\x01\x02\x03"
    assert rt.wait(sent)["status"] == "completed"
    rt.channel_close(pkt)

    sc = rt.channel_open("scalar16", rt.create_endpoint(a, 12), rt.create_endpoint(b, 22))
    assert rt.scalar_send(sc, 65535, bits=16)
    assert rt.scalar_recv(sc, bits=16) == 65535
    assert rt.scalar_recv(sc, bits=16) is None
    try:
        rt.scalar_send(sc, 1, bits=32)
    except m.McommError:
        pass
    else:
        raise AssertionError("width mismatch accepted")
    assert rt.buffers_in_use() == 0


def primitives():
    q = m.NonBlockingBuffer(2)
    assert q.insert(1) == "ok" and q.insert(2) == "ok" and q.insert(3) == "full"
    assert q.read() == ("ok", 1) and q.read() == ("ok", 2) and q.read() == ("empty", None)

    cell = m.StateCell(slots=2, capacity=16)
    cell.write(b"state-1")
    cell.write(b"state-2")
    assert cell.read() == b"state-2" and cell.version == 4


def model_and_metrics():
    assert abs(m.theoretical_max() - 630_000) <= 6_300
    r = m.simulate(cores=2, hit_rate=0.8, completions=20_000)
    assert r["achieved_throughput_pct"] > 99 and r["little_error"] < 0.02
    assert math.isclose(m.throughput_speedup(740, 1000), 0.74)
    assert m.latency_speedup(14, 7) == 2.0


def stress():
    rows = m.stress(str(TOPOLOGIES / "ring4.toml"), backend="locked", count=500)
    assert len(rows) == 4 and all(r["id_sum"] == 500 * 501 // 2 for r in rows)


if __name__ == "__main__":
    for backend in ("lockfree", "locked"):
        messages(backend)
    primitives()
    model_and_metrics()
    stress()
    print("smoke test passed")
