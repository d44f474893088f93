import numpy as np
import pytest

from aisnap.core import LinearMap, NormSpec, residual
from aisnap.engine import Schedule
from aisnap.oracle import check_cls_cut, check_prop4_gap, check_snapshot_equality, xbar_of
from aisnap.protocols import (APPROXIMATE, DETECTORS, EXACT, SnapshotResult, evaluate_and_decide,
                              requirement)
from aisnap.runner import RunConfig, simulate
from aisnap.simnet import ChannelPolicy, DelayModel, Network, ProtocolMisuse
from aisnap.core import delta_coeffs

from conftest import synthetic

SYNC = Schedule("sync")


def two_proc(a00=0.5, a01=1e-9, a10=0.1, c0=1.0):
    return LinearMap({(0, 0): np.array([[a00]]), (0, 1): np.array([[a01]]),
                      (1, 0): np.array([[a10]])}, [np.array([c0]), np.zeros(1)])


def actions(res, pid, action):
    return [t for t in res.transcript if t[1] == pid and t[2] == action]


def all_equal(res):
    return all(check_snapshot_equality(e, res.fmap).verdict == "PASS" for e in res.completed)


@pytest.mark.parametrize("proto", ["ais1", "ais2"])
def test_two_processes_fifo_equal(proto):
    f = two_proc(a01=0.2)
    for seed in range(30):
        res = simulate(f, RunConfig(proto, eps=1e-6, threshold=1e-6, seed=seed))
        assert res.converged and res.completed
        assert all_equal(res)
        assert res.reduction_count == len(res.epochs)


@pytest.mark.parametrize("proto", ["ais1", "ais2", "nfais1", "nfais2", "nfais3", "nfais4",
                                   "nfais5", "sync"])
def test_single_process(proto):
    f = LinearMap({(0, 0): np.array([[0.5]])}, [np.array([1.0])])
    res = simulate(f, RunConfig(proto, policy=ChannelPolicy.bounded(0), eps=1e-6, threshold=1e-6))
    assert res.converged
    assert res.control_sent == 0
    assert res.reduction_count == len(res.epochs)


def test_ais1_marker_before_convergence_cascades():
    # process 0 converges at once, process 1 slowly
    f = LinearMap({(0, 1): np.array([[1e-12]]), (1, 1): np.array([[0.95]]),
                   (1, 0): np.array([[0.01]])}, [np.array([1.0]), np.zeros(1)])
    res = simulate(f, RunConfig("ais1", schedule=SYNC, delays=DelayModel("constant", mean=0.5),
                                eps=1e-6, threshold=1e-6, max_epochs=1), [np.zeros(1), np.ones(1)])
    rec = actions(res, 1, "record_own")[0]
    delta_then = [d for _k, i, it, d, _s in res.history.updates if i == 1 and it == rec[4]][0]
    assert delta_then > 1e-6
    assert all_equal(res)


def test_ais2_early_marker_waits_for_own_convergence():
    f = LinearMap({(0, 1): np.array([[1e-12]]), (1, 1): np.array([[0.9]]),
                   (1, 0): np.array([[0.01]])}, [np.array([1.0]), np.zeros(1)])
    res = simulate(f, RunConfig("ais2", schedule=SYNC, delays=DelayModel("constant", mean=0.5),
                                eps=1e-6, threshold=1e-6, max_epochs=1), [np.zeros(1), np.ones(1)])
    entry = [t for t in actions(res, 1, "record") if t[4] == 0][0]
    own = actions(res, 1, "record_own")[0]
    ret = actions(res, 1, "return")[0]
    assert entry[0] < own[0] <= ret[0]
    assert all_equal(res)


def crossing_run(proto):
    """Process 0's marker is overtaken by its next computation message."""
    f = two_proc()

    def delay(m):
        if m.src == 0 and m.kind == "marker":
            return 5.0
        return 0.2

    return simulate(f, RunConfig(proto, policy=ChannelPolicy.arbitrary(64), schedule=SYNC,
                                 delay_override=delay, eps=0.3, threshold=0.3, max_epochs=1))


def test_marker_crossed_by_newer_computation():
    res = crossing_run("nfais2")
    rec = res.epochs[0].results
    sent = rec[0].own
    assert np.array_equal(rec[1].entries[0], sent)
    assert all_equal(res)
    # without a payload the receiver reads the newer block and equality breaks
    bad = crossing_run("ais2")
    assert not np.array_equal(bad.epochs[0].results[1].entries[0], bad.epochs[0].results[0].own)
    assert not all_equal(bad)


def test_nfais1_crossing_keeps_payload():
    res = crossing_run("nfais1")
    assert all_equal(res)


def test_nfais3_fixed_point_neighbor_and_no_control():
    f = synthetic(n=6, density=0.3).fmap
    for seed in range(20):
        res = simulate(f, RunConfig("nfais3", policy=ChannelPolicy.typed_fifo(),
                                    delays=DelayModel("adversarial"), eps=1e-6, threshold=1e-6,
                                    seed=seed))
        assert res.converged
        assert res.control_sent == 0
        assert not [e for e in res.history.log.entries if e[1] == "send" and e[4] != "comp"]
        assert all_equal(res)
    # a neighbor sitting exactly at its fixed point is recorded from two equal messages
    g = LinearMap({(0, 1): np.array([[0.0]]), (1, 0): np.array([[0.5]])},
                  [np.array([2.0]), np.zeros(1)])
    res = simulate(g, RunConfig("nfais3", policy=ChannelPolicy.typed_fifo(), eps=1e-9,
                                threshold=1e-9))
    assert res.converged
    assert np.array_equal(res.epochs[-1].results[1].entries[0], np.array([2.0]))


def nfais4_cfg(**kw):
    base = dict(policy=ChannelPolicy.bounded(2), eta=2, eps=1e-6, threshold=1e-6, seed=5,
                delays=DelayModel("adversarial"))
    base.update(kw)
    return RunConfig("nfais4", **base)


def test_nfais4_bump_restarts_round():
    f = synthetic(n=4).fmap
    clean = simulate(f, nfais4_cfg())
    assert clean.converged
    first = actions(clean, 0, "record_own")[0][4]
    bumped = simulate(f, nfais4_cfg(bumps={0: {first + 1: np.array([1e-3])}}))
    assert bumped.converged
    flags = [t for t in bumped.transcript if t[1] == 0 and t[2] == "send_flag"]
    assert flags[0][4] == 0
    assert actions(bumped, 0, "discard_own")
    # neighbors saw the zero flag
    assert [t for t in bumped.transcript if t[2] == "flag" and t[4] == (0, 0)]
    d = delta_coeffs(f).deltaF
    for e in bumped.completed:
        assert check_prop4_gap(e, f, d, 2, 2.0, 1e-6).verdict == "PASS"


def _flag_run(flag_delay):
    # eta updates (and their messages) separate a marker from its flag, so
    # the flag can only pass the marker on a window wider than eta
    f = two_proc(a01=0.3, a10=0.3)

    def delay(m):
        if m.kind == "marker":
            return 3.0
        if m.kind == "flag":
            return flag_delay
        return 0.4

    return simulate(f, RunConfig("nfais4", policy=ChannelPolicy.bounded(3), eta=1, schedule=SYNC,
                                 delay_override=delay, eps=1e-3, threshold=1e-3, max_epochs=1))


def test_nfais4_flag_overtakes_marker():
    slow, fast = _flag_run(5.0), _flag_run(0.3)
    order = [(e[4], e[2]) for e in fast.history.log.entries
             if e[1] == "deliver" and e[4] != "comp"]
    assert order.index(("flag", 0)) < order.index(("marker", 0))
    a, b = slow.epochs[0].results, fast.epochs[0].results
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.own, rb.own)
        assert ra.entries.keys() == rb.entries.keys()
        for j in ra.entries:
            assert np.array_equal(ra.entries[j], rb.entries[j])


@pytest.mark.parametrize("seed", range(25))
def test_nfais5_eta0_lockstep_with_ais2(seed):
    f = synthetic(n=6, density=0.3).fmap
    kw = dict(delays=DelayModel("adversarial"), eps=1e-6, threshold=1e-6, seed=seed)
    a = simulate(f, RunConfig("ais2", policy=ChannelPolicy.fifo(), **kw))
    b = simulate(f, RunConfig("nfais5", policy=ChannelPolicy.bounded(0, control_first=True),
                              eta=0, **kw))
    assert a.transcript == b.transcript
    assert list(a.history.log.lines()) == list(b.history.log.lines())


def test_cls_fig1_trace():
    f = LinearMap({(0, 1): np.array([[0.5]]), (1, 0): np.array([[0.5]])},
                  [np.ones(1), np.ones(1)])
    delays = {(0, 1, "comp", 0): 0.3, (0, 1, "marker", 1): 2.5,
              (1, 0, "comp", 0): 3.0, (1, 0, "marker", 1): 0.5}
    sched = Schedule("trace", trace=((0,), (1,)) + ((),) * 20, max_starve=10**6)

    def run(policy):
        return simulate(f, RunConfig("cls", policy=policy, schedule=sched, max_ticks=20,
                                     delay_override=lambda m: delays.get(
                                         (m.src, m.dst, m.kind, m.seq), 1.0)))

    fifo = run(ChannelPolicy.fifo())
    assert fifo.status == "snapshot"
    p, q = fifo.epochs[0].results
    # p recorded first; the message q sent before its recording is in p's channel
    assert [s for s, _ in p.channels[1]] == [0]
    assert q.channels[0] == []
    assert check_cls_cut(fifo).verdict == "PASS"
    loose = run(ChannelPolicy.arbitrary(64))
    p, _ = loose.epochs[0].results
    assert p.channels[1] == []
    cut = check_cls_cut(loose)
    assert cut.verdict == "FAIL" and "lost=1" in cut.detail


def test_cls_no_messages_in_flight():
    f = LinearMap({(0, 1): np.array([[0.5]]), (1, 0): np.array([[0.5]])},
                  [np.ones(1), np.ones(1)])
    # both processes idle after one update each; the marker goes out later
    sched = Schedule("trace", trace=((1,), (), (), (0,)) + ((),) * 20, max_starve=10**6)
    res = simulate(f, RunConfig("cls", schedule=sched, initiators=(0,), max_ticks=25,
                                delays=DelayModel("constant", mean=0.5)))
    assert res.status == "snapshot"
    assert all(ch == [] for r in res.epochs[0].results for ch in r.channels.values())


@pytest.mark.parametrize("seed", range(20))
def test_cls_fifo_cut_consistent(seed):
    f = synthetic(n=5, density=0.4).fmap
    res = simulate(f, RunConfig("cls", delays=DelayModel("adversarial"), seed=seed))
    assert res.status == "snapshot"
    assert check_cls_cut(res).verdict == "PASS"


def test_evaluate_and_decide():
    f = synthetic(n=3).fmap
    x = [np.full(1, v) for v in (0.1, 0.2, 0.3)]
    spec = NormSpec.max_weighted()
    results = [SnapshotResult(i, 0, 0.0, x[i], {j: x[j] for j in f.dependency(i) if j != i}, 1)
               for i in range(3)]
    net = Network(3)
    d = evaluate_and_decide(results, f, spec, 1e-6, net)
    assert d.value == residual(f, x, spec) and not d.converged
    assert net.reduction_count == 1
    results[1] = SnapshotResult(1, 1, 0.0, x[1], {}, 1)
    with pytest.raises(ProtocolMisuse):
        evaluate_and_decide(results, f, spec, 1e-6, net)
    with pytest.raises(ProtocolMisuse):
        evaluate_and_decide(results[:2], f, spec, 1e-6, net)
    assert net.reduction_count == 1


def test_continue_then_converge():
    f = synthetic(n=6).fmap
    res = simulate(f, RunConfig("ais2", eps=1e-4, threshold=1e-8, seed=0))
    assert res.converged and len(res.epochs) > 1
    assert [e.decision.converged for e in res.epochs] == [False] * (len(res.epochs) - 1) + [True]
    assert [e.epoch for e in res.epochs] == list(range(len(res.epochs)))
    assert res.reduction_count == len(res.epochs)


def test_requirements_matrix():
    fifo, arb = ChannelPolicy.fifo(), ChannelPolicy.arbitrary()
    typed, b2 = ChannelPolicy.typed_fifo(), ChannelPolicy.bounded(2)
    b2cf = ChannelPolicy.bounded(2, control_first=True)
    for p in DETECTORS:
        assert requirement(p, fifo) is None
    assert requirement("ais1", arb) and requirement("ais2", typed)
    assert requirement("nfais1", arb) is None and requirement("nfais2", b2) is None
    assert requirement("nfais3", typed) is None and requirement("nfais3", arb)
    assert requirement("nfais4", b2) is None and requirement("nfais4", typed)
    assert requirement("nfais5", b2cf) is None and requirement("nfais5", b2)
    assert requirement("nfais5", ChannelPolicy.bounded(0)) is None
    assert EXACT.isdisjoint(APPROXIMATE)


def test_marker_payload_sizes():
    f = synthetic(n=5, block_size=3, density=0.3).fmap
    for proto, per_marker in (("nfais2", 3), ("ais2", 0), ("nfais5", 0)):
        pol = ChannelPolicy.bounded(0, control_first=True) if proto == "nfais5" else ChannelPolicy.fifo()
        res = simulate(f, RunConfig(proto, policy=pol, eps=1e-6, threshold=1e-6))
        assert res.control_volume == per_marker * res.control_sent
