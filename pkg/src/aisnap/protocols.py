"""Termination detectors and the single-reduction convergence test.

Each detector is driven by three hooks called from the simulation loop:

``on_local_update()``
    after the process updated its own block and sent it to its dependents;
``on_control(msg)``
    when a marker or flagged marker arrives;
``on_computation(src, payload, seq, stamp)``
    when a computation message arrives. ``stamp`` is
    ``(sender_iter, sender_epoch)`` for detectors with ``reads_stamps`` set,
    ``None`` otherwise.

A detector sets ``result`` once it has a complete recorded vector for the
current epoch. Markers and flags carry ``(epoch, round)`` tags; messages
from an older epoch are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .core import FixedPointMap, NormSpec, block_norm
from .engine import ProcessState
from .simnet import FLAG, MARKER, Message, Network, ProtocolMisuse


@dataclass(eq=False)
class SnapshotResult:
    """Recorded vector of one process for one epoch.

    ``own`` is the process's own entry, ``entries[j]`` its entry for each
    neighbor ``j`` it reads. ``own_iter`` is the own iteration count at the
    time ``own`` was recorded.
    """

    pid: int
    epoch: int
    time: float
    own: np.ndarray
    entries: dict[int, np.ndarray]
    own_iter: int
    state: list[np.ndarray] | None = None
    channels: dict[int, list] | None = None

    def vector(self, fill: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Full recorded vector; blocks the process does not read come from ``fill``."""
        out = list(fill)
        for j, b in self.entries.items():
            out[j] = b
        out[self.pid] = self.own
        return out


class Context(Protocol):
    time: float

    def send_control(self, msg: Message) -> None: ...

    def trace(self, pid: int, action: str, detail=None) -> None: ...

    def returned(self, pid: int) -> None: ...


class Detector:
    """Shared bookkeeping for all detectors."""

    name = "base"
    reads_stamps = False
    sends_markers = True
    marker_payload = False

    def __init__(self, proc: ProcessState, ctx: Context, eta: int = 0):
        self.proc = proc
        self.ctx = ctx
        self.eta = eta
        self.reset(0)

    def reset(self, epoch: int) -> None:
        self.epoch = epoch
        self.own: np.ndarray | None = None
        self.own_iter = -1
        self.entries: dict[int, np.ndarray] = {}
        self.result: SnapshotResult | None = None
        self.markers_sent = False

    # hooks
    def before_update(self) -> None:
        pass

    def on_local_update(self) -> None:
        pass

    def on_control(self, msg: Message) -> None:
        pass

    def on_computation(self, src: int, payload: np.ndarray, seq: int, stamp=None) -> None:
        pass

    # helpers
    @property
    def steady_enough(self) -> bool:
        return self.proc.steady >= max(self.eta, 1)

    def _stale(self, msg: Message) -> bool:
        return msg.tag is None or msg.tag[0] != self.epoch

    def _record_own(self) -> None:
        p = self.proc
        self.own = p.view[p.pid]
        self.own_iter = p.iters
        self.ctx.trace(p.pid, "record_own", p.iters)

    def _broadcast(self, kind: str = MARKER, flag: int | None = None, round_: int = 0) -> None:
        p = self.proc
        payload = self.own if (kind == MARKER and self.marker_payload) else None
        for j in p.dependents:
            self.ctx.send_control(Message(p.pid, j, kind, payload=payload, flag=flag,
                                          tag=(self.epoch, round_)))
        if kind == MARKER:
            self.markers_sent = True
        self.ctx.trace(p.pid, "send_" + kind, flag)

    def _set_entry(self, j: int, value: np.ndarray) -> None:
        self.entries[j] = value
        self.ctx.trace(self.proc.pid, "record", j)

    def _complete(self) -> bool:
        return self.own is not None and all(j in self.entries for j in self.proc.deps)

    def _maybe_return(self) -> None:
        if self.result is None and self._complete():
            p = self.proc
            self.result = SnapshotResult(p.pid, self.epoch, self.ctx.time, self.own,
                                         dict(self.entries), self.own_iter)
            self.ctx.trace(p.pid, "return", self.epoch)
            self.ctx.returned(p.pid)


class AIS1(Detector):
    """FIFO snapshot; the first marker also triggers the own recording."""

    name = "ais1"
    cascade = True

    def _record_and_broadcast(self):
        self._record_own()
        self._broadcast()

    def on_local_update(self):
        if self.result is None and self.own is None and self.steady_enough:
            self._record_and_broadcast()
        self._maybe_return()

    def on_control(self, msg):
        if self._stale(msg) or self.result is not None:
            return
        self._set_entry(msg.src, self._marker_value(msg))
        if self.cascade and self.own is None:
            self._record_and_broadcast()
        self._maybe_return()

    def _marker_value(self, msg: Message) -> np.ndarray:
        return self.proc.view[msg.src]


class AIS2(AIS1):
    """FIFO snapshot without the marker cascade."""

    name = "ais2"
    cascade = False


class NFAIS1(AIS1):
    """Markers carry the sender's recorded block."""

    name = "nfais1"
    marker_payload = True

    def _marker_value(self, msg):
        return msg.payload


class NFAIS2(NFAIS1):
    name = "nfais2"
    cascade = False


class NFAIS3(Detector):
    """Marker-free detection from two consecutive computation messages.

    Needs FIFO delivery of computation messages. Only pairs whose newer
    message was sent in the current epoch qualify.
    """

    name = "nfais3"
    reads_stamps = True
    sends_markers = False

    def on_local_update(self):
        if self.result is None and self.own is None and self.steady_enough:
            self._record_own()
        self._maybe_return()

    def on_computation(self, src, payload, seq, stamp=None):
        if self.result is not None or src in self.entries or src not in self.proc.deps:
            return
        buf = self.proc.prev_received[src]
        if len(buf) < 2:
            return
        (prev, prev_iter, _), (last, last_iter, last_epoch) = buf
        if (last_iter == prev_iter + 1 and last_epoch == self.epoch
                and block_norm(last - prev) < self.proc.eps):
            self._set_entry(src, last)
            self._maybe_return()


class NFAIS5(Detector):
    """Single marker after ``eta`` steady iterations."""

    name = "nfais5"

    def on_local_update(self):
        if self.result is None and self.own is None and self.steady_enough:
            self._record_own()
            self._broadcast()
        self._maybe_return()

    def on_control(self, msg):
        if self._stale(msg) or self.result is not None:
            return
        self._set_entry(msg.src, self.proc.view[msg.src])
        self._maybe_return()


class NFAIS4(Detector):
    """Marker after ``eta`` steady iterations, then a flagged marker.

    The flag is 1 when the process stayed steady for ``eta`` further updates
    and 0 as soon as one of them is not steady; a 0 discards the round on
    both sides and the process starts a new round.
    """

    name = "nfais4"

    def reset(self, epoch):
        super().reset(epoch)
        self.round = 0
        self.flag: int | None = None
        self.since_marker = 0
        # per neighbor: [round, flag] of the newest round heard of
        self.peer: dict[int, list] = {}

    def on_local_update(self):
        if self.result is not None:
            return
        p = self.proc
        if self.own is not None and self.flag is None:
            if p.last_delta < p.eps:
                self.since_marker += 1
            else:
                self.flag = 0
                self._broadcast(FLAG, 0, self.round)
                self.own = None
                self.own_iter = -1
                self.round += 1
                self.flag = None
                self.ctx.trace(p.pid, "discard_own", self.round)
        if self.own is None and self.steady_enough:
            self._record_own()
            self._broadcast(MARKER, None, self.round)
            self.since_marker = 0
        if self.own is not None and self.flag is None and self.since_marker >= self.eta:
            self.flag = 1
            self._broadcast(FLAG, 1, self.round)
        self._maybe_return()

    def _peer(self, j: int, round_: int) -> list | None:
        state = self.peer.get(j)
        if state is None or round_ > state[0]:
            state = self.peer[j] = [round_, None]
            self.entries.pop(j, None)
        elif round_ < state[0]:
            return None
        return state

    def on_control(self, msg):
        if self._stale(msg) or self.result is not None:
            return
        state = self._peer(msg.src, msg.tag[1])
        if state is None:
            return
        if msg.kind == MARKER:
            if state[1] != 0:
                self._set_entry(msg.src, self.proc.view[msg.src])
        else:
            state[1] = msg.flag
            self.ctx.trace(self.proc.pid, "flag", (msg.src, msg.flag))
            if msg.flag == 0:
                self.entries.pop(msg.src, None)
        self._maybe_return()

    def _complete(self):
        if self.own is None or self.flag != 1:
            return False
        for j in self.proc.deps:
            state = self.peer.get(j)
            if state is None or state[1] != 1 or j not in self.entries:
                return False
        return True


class CLS(Detector):
    """Chandy-Lamport snapshot: local state plus reception-channel contents.

    Initiators record at their first local update. The result is not used
    for residual evaluation.
    """

    name = "cls"

    def __init__(self, proc, ctx, eta=0, initiator: bool = False):
        self.initiator = initiator
        super().__init__(proc, ctx, eta)

    def reset(self, epoch):
        super().reset(epoch)
        self.state: list[np.ndarray] | None = None
        self.closed: set[int] = set()
        self.channels: dict[int, list] = {}

    def _record_state(self):
        p = self.proc
        self.state = list(p.view)
        self._record_own()
        self.channels = {j: [] for j in p.deps}
        self._broadcast()

    def on_local_update(self):
        if self.initiator and self.state is None:
            self._record_state()
        self._maybe_return()

    def on_control(self, msg):
        if self._stale(msg) or self.result is not None:
            return
        if self.state is None:
            self._record_state()
        self.closed.add(msg.src)
        self._set_entry(msg.src, self.state[msg.src])
        self._maybe_return()

    def on_computation(self, src, payload, seq, stamp=None):
        if self.state is not None and src not in self.closed and src in self.channels:
            self.channels[src].append((seq, payload))
            self.ctx.trace(self.proc.pid, "channel", (src, seq))

    def _complete(self):
        return self.state is not None and all(j in self.closed for j in self.proc.deps)

    def _maybe_return(self):
        was = self.result
        super()._maybe_return()
        if was is None and self.result is not None:
            self.result.state = self.state
            self.result.channels = {j: list(v) for j, v in self.channels.items()}


class Synchronous(Detector):
    """Baseline for synchronous iterations: records the view before every update."""

    name = "sync"
    sends_markers = False

    def before_update(self):
        if self.result is not None:
            return
        p = self.proc
        self.own = p.view[p.pid]
        self.own_iter = p.iters
        self.entries = {j: p.view[j] for j in p.deps}
        self._maybe_return()


DETECTORS = {cls.name: cls for cls in (CLS, AIS1, AIS2, NFAIS1, NFAIS2, NFAIS3, NFAIS4, NFAIS5,
                                       Synchronous)}

# protocols whose completed snapshots are consistent (all recorded copies equal)
EXACT = frozenset({"ais1", "ais2", "nfais1", "nfais2", "nfais3", "sync"})
APPROXIMATE = frozenset({"nfais4", "nfais5"})


def make_detector(name: str, proc: ProcessState, ctx: Context, eta: int = 0,
                  initiators: Sequence[int] = (0,)) -> Detector:
    try:
        cls = DETECTORS[name]
    except KeyError:
        raise ValueError(f"unknown protocol {name!r}; choose from {sorted(DETECTORS)}") from None
    if cls is CLS:
        return CLS(proc, ctx, eta, initiator=proc.pid in initiators)
    return cls(proc, ctx, eta)


def requirement(protocol: str, policy) -> str | None:
    """Why ``protocol`` is not guaranteed under ``policy``, or ``None`` if it is."""
    kind = policy.kind
    if protocol in ("cls", "ais1", "ais2") and kind != "fifo":
        return f"{protocol} needs FIFO channels: a marker must not overtake a computation message"
    if protocol == "nfais3" and kind not in ("fifo", "typed_fifo"):
        return "nfais3 needs FIFO delivery of computation messages"
    if protocol == "nfais4" and kind not in ("fifo", "bounded"):
        return "nfais4 needs a bound on how many messages any message may cross"
    if protocol == "nfais5":
        if kind == "fifo" or (kind == "bounded" and (policy.control_first or policy.eta == 0)):
            return None
        return ("nfais5 needs bounded crossing where no computation message overtakes "
                "an earlier marker")
    return None


@dataclass
class Decision:
    epoch: int
    value: float
    threshold: float
    converged: bool
    contributions: list[float] = field(default_factory=list)


def evaluate_and_decide(results: Sequence[SnapshotResult], f: FixedPointMap, spec: NormSpec,
                        threshold: float, net: Network) -> Decision:
    """Combine per-process residual contributions with one reduction.

    Process ``i`` contributes ``||f_i(ybar^i) - ybar^i_i||`` (scaled by its
    weight for weighted max norms); the reduction yields the approximate
    residual ``||g(ybar) - xbar||``.
    """
    if len(results) != f.n or any(r is None for r in results):
        raise ProtocolMisuse("every process must return a snapshot before evaluation")
    epochs = {r.epoch for r in results}
    if len(epochs) != 1:
        raise ProtocolMisuse(f"snapshots from different epochs {sorted(epochs)}")
    if spec.kind == "maxw":
        spec.weight_vector(f.n)
    zeros = [np.zeros(d) for d in f.sizes]
    contributions = []
    for r in results:
        i = r.pid
        local = block_norm(f.eval_block(i, r.vector(zeros)) - r.own)
        contributions.append(spec.contribution(i, local))
    value = net.reduce(contributions, spec.reduce_op, spec.p)
    return Decision(results[0].epoch, value, threshold, value < threshold, contributions)
