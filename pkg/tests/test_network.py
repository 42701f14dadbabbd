import json
import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from starqkd.model import IntensitySettings, deployed_links, preset
from starqkd.network import (
    AlignmentError,
    InvalidSplitError,
    KeyBuffer,
    KeyStore,
    NetworkConfig,
    NoClientsError,
    Schedule,
    SchedulerState,
    consume_key,
    passive_network_comparator,
    run_network,
    schedule_next,
)
from starqkd.protocol import InsufficientKeyError
from starqkd.security import analytic_estimate, operating_settings


def three(**kw):
    return NetworkConfig(clients=[(l.name, l) for l in deployed_links()], **kw)


def test_round_robin_order():
    cfg = three()
    state = SchedulerState()
    picks = [schedule_next(state, cfg)[0] for _ in range(6)]
    assert picks == cfg.names * 2


def test_single_client_always_served():
    cfg = NetworkConfig(clients=[("keplero", preset("keplero"))])
    state = SchedulerState()
    assert {schedule_next(state, cfg)[0] for _ in range(5)} == {"keplero"}


def test_no_clients():
    cfg = NetworkConfig(clients=[])
    with pytest.raises(NoClientsError):
        schedule_next(SchedulerState(), cfg)
    with pytest.raises(NoClientsError):
        run_network(cfg, 10, seed=0)


def test_on_demand_serves_emptiest_buffer():
    cfg = three(schedule=Schedule("on_demand"), buffer_capacity_bits=1000)
    buf = KeyBuffer(cfg.names)
    buf.add_block("benjamin", np.ones(500, np.uint8))
    buf.add_block("keplero", np.ones(200, np.uint8))
    assert schedule_next(SchedulerState(), cfg, buf)[0] == "copernico"


def test_priority_proportions():
    cfg = three(schedule=Schedule("priority", (3, 2, 1)))
    state = SchedulerState()
    picks = [schedule_next(state, cfg)[0] for _ in range(600)]
    counts = [picks.count(n) for n in cfg.names]
    assert counts == [300, 200, 100]


def test_alignment_exceeding_slot():
    with pytest.raises(AlignmentError):
        run_network(three(alignment_time_s=2.0, slot_duration_s=2.0), 10, seed=0)


def test_too_many_clients_for_switch():
    with pytest.raises(ValueError):
        NetworkConfig(clients=[(l.name, l) for l in deployed_links()], switch_fanout=2)


def test_zero_alignment_single_client_matches_continuous():
    link = preset("keplero")
    cfg = NetworkConfig(clients=[("keplero", link)], alignment_time_s=0.0, slot_duration_s=2.0)
    run = run_network(cfg, 100.0, seed=1, mode="analytic")
    st_ = operating_settings(link)
    est = analytic_estimate(link, st_)
    continuous = 100.0 * est.rate_bps
    # one floor() per slot
    assert abs(run.yields["keplero"].key_bits - continuous) <= 50


def test_alignment_overhead_reduces_yield():
    totals = [run_network(three(alignment_time_s=a), 60, seed=2, mode="analytic").total_key_bits
              for a in (0.25, 0.5, 1.0)]
    assert totals[0] > totals[1] > totals[2]


def test_alignment_charged_only_on_switch():
    cfg = NetworkConfig(clients=[("keplero", preset("keplero"))], alignment_time_s=0.5)
    run = run_network(cfg, 10.0, seed=0, mode="analytic")
    assert sum(e["kind"] == "alignment" for e in run.events) == 1
    assert run.yields["keplero"].productive_s == pytest.approx(9.5)


def test_passive_comparator_full_split_is_continuous():
    link = preset("copernico")
    cfg = NetworkConfig(clients=[("copernico", link)])
    y = passive_network_comparator(cfg, [1.0], 10.0)["copernico"]
    est = analytic_estimate(link, operating_settings(link))
    pulses = 10.0 * link.pulse_rate_hz
    assert y.key_bits == math.floor(pulses * est.rate_per_pulse * IntensitySettings().signal_share)


def test_passive_comparator_zero_split():
    cfg = three()
    y = passive_network_comparator(cfg, [0.5, 0.5, 0.0], 10.0)
    assert y["keplero"].key_bits == 0
    assert y["benjamin"].key_bits > 0


@pytest.mark.parametrize("split", [[0.5, 0.5, 0.5], [0.5, 0.5], [-0.1, 0.5, 0.5]])
def test_passive_comparator_invalid(split):
    with pytest.raises(InvalidSplitError):
        passive_network_comparator(three(), split, 10.0)


def test_consume_key_semantics():
    buf = KeyBuffer(["a"])
    bits = np.random.default_rng(0).integers(0, 2, 100).astype(np.uint8)
    buf.add_block("a", bits[:60])
    buf.add_block("a", bits[60:])
    assert len(consume_key(buf, "a", 0)) == 0
    first = consume_key(buf, "a", 30)
    second = consume_key(buf, "a", 50)
    assert np.array_equal(np.concatenate([first, second]), bits[:80])
    with pytest.raises(InsufficientKeyError) as err:
        consume_key(buf, "a", 21)
    assert err.value.available == 20 and err.value.requested == 21
    assert buf.available("a") == 20


def test_concurrent_consumers_disjoint():
    buf = KeyBuffer(["a"])
    buf.add_block("a", np.arange(4000) % 2)
    got = []
    lock = threading.Lock()

    def worker():
        for _ in range(40):
            try:
                k = buf.consume("a", 10)
            except InsufficientKeyError:
                return
            with lock:
                got.append(k)

    ts = [threading.Thread(target=worker) for _ in range(10)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert sum(len(k) for k in got) == 4000
    assert buf.consumed("a") == 4000


@hsettings(max_examples=25)
@given(st.integers(1, 120), st.sampled_from(["round_robin", "on_demand"]), st.floats(0.0, 1.5))
def test_conservation_and_time_accounting(total, kind, align):
    cfg = three(schedule=Schedule(kind), alignment_time_s=align)
    run = run_network(cfg, float(total), seed=3, mode="analytic")
    for n in cfg.names:
        assert run.buffer.produced(n) == run.yields[n].key_bits
        assert run.buffer.available(n) + run.buffer.consumed(n) == run.buffer.produced(n)
    align_time = sum(e["detail"]["duration_s"] for e in run.events if e["kind"] == "alignment")
    productive = sum(y.productive_s for y in run.yields.values())
    assert productive + align_time == pytest.approx(total)


def test_event_log_deterministic(tmp_path):
    a = run_network(three(), 30, seed=7, mode="analytic")
    b = run_network(three(), 30, seed=7, mode="analytic")
    pa = a.write_events(tmp_path / "a.jsonl")
    pb = b.write_events(tmp_path / "b.jsonl")
    assert pa.read_bytes() == pb.read_bytes()
    kinds = {json.loads(l)["kind"] for l in pa.read_text().splitlines()}
    assert kinds == {"switch", "alignment", "session"}
    with pytest.raises(FileExistsError):
        a.write_events(pa)


def test_keystore_persistence(tmp_path):
    run = run_network(three(), 12, seed=8, mode="analytic")
    run.buffer.consume("benjamin", 100)
    run.buffer.save(tmp_path / "ks")
    ks = KeyStore(tmp_path / "ks")
    avail = ks.available("benjamin")
    assert avail == run.buffer.available("benjamin")
    expected = run.buffer.consume("benjamin", 64)
    assert np.array_equal(ks.consume("benjamin", 64), expected)
    assert KeyStore(tmp_path / "ks").available("benjamin") == avail - 64
    with pytest.raises(FileExistsError):
        run.buffer.save(tmp_path / "ks")


def test_keystore_reserve_rolls_back_on_error(tmp_path):
    buf = KeyBuffer(["a"])
    buf.add_block("a", np.ones(64, np.uint8))
    buf.save(tmp_path)
    ks = KeyStore(tmp_path)
    with pytest.raises(RuntimeError):
        with ks.reserve("a", 16):
            raise RuntimeError("crash before use")
    assert ks.available("a") == 64
    with pytest.raises(InsufficientKeyError):
        ks.consume("a", 65)


def test_monte_carlo_network_small():
    link = preset("benjamin")
    cfg = NetworkConfig(clients=[("benjamin", link)], alignment_time_s=0.5, slot_duration_s=1.0,
                        settings={"benjamin": IntensitySettings(0.6, 0.1)})
    run = run_network(cfg, 2.0, seed=9)
    sessions = [e for e in run.events if e["kind"] == "session"]
    assert len(sessions) == 2
    assert sessions[0]["detail"]["pulses"] == 2_000_000
    assert run.yields["benjamin"].key_bits > 0
