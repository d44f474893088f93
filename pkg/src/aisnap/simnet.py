"""Seeded discrete-event network of ``n`` processes.

Every ordered process pair has one directed channel carrying all message
kinds. A channel policy decides which in-flight messages may be delivered
ahead of earlier-sent ones; a delivery that would break the policy is held
back until the oldest in-flight message on the channel has been delivered.
The oldest message is always deliverable, so every sent message is
eventually delivered.

Reordering is limited by a sequence window: a message can be delivered
only if it was sent at most ``bound`` sends after the oldest undelivered
message on its channel. Hence no message overtakes, or is overtaken by,
more than ``bound`` others, and a message never overtakes one that was
sent more than ``bound`` sends before it.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

COMP = "comp"
MARKER = "marker"
FLAG = "flag"
CONTROL_KINDS = (MARKER, FLAG)

# heap priorities at equal simulated time: deliveries first, then ticks
PRIO_DELIVER = 0
PRIO_TICK = 1


class ProtocolMisuse(RuntimeError):
    """Raised when a collective or protocol step is invoked out of order."""


@dataclass(slots=True, eq=False)
class Message:
    src: int
    dst: int
    kind: str
    payload: np.ndarray | None = None
    flag: int | None = None
    tag: tuple[int, int] | None = None
    # stamps of computation messages; read only by the oracle and NFAIS3
    sender_iter: int = -1
    sender_epoch: int = -1
    seq: int = -1
    sent_at: float = 0.0
    overtaken_by: int = 0
    overtook: int = 0

    @property
    def is_control(self) -> bool:
        return self.kind != COMP


@dataclass(frozen=True)
class ChannelPolicy:
    """Delivery-ordering model of a directed channel.

    kind
        ``fifo``, ``arbitrary``, ``bounded`` or ``typed_fifo``.
    eta
        For ``bounded``: the reordering window. A message may only be
        overtaken by the next ``eta`` messages sent after it.
    max_hold
        Window for ``arbitrary`` and for cross-kind overtaking under
        ``typed_fifo``.
    control_first
        For ``bounded``: a computation message never overtakes an
        earlier-sent control message.
    """

    kind: str = "fifo"
    eta: int = 0
    max_hold: int = 64
    control_first: bool = False

    def __post_init__(self):
        if self.kind not in ("fifo", "arbitrary", "bounded", "typed_fifo"):
            raise ValueError(f"unknown channel policy {self.kind!r}")
        if self.eta < 0 or self.max_hold < 0:
            raise ValueError("crossing bounds must be nonnegative")

    @classmethod
    def fifo(cls):
        return cls("fifo")

    @classmethod
    def arbitrary(cls, max_hold: int = 64):
        return cls("arbitrary", max_hold=max_hold)

    @classmethod
    def bounded(cls, eta: int, max_hold: int = 64, control_first: bool = False):
        return cls("bounded", eta=eta, max_hold=max_hold, control_first=control_first)

    @classmethod
    def typed_fifo(cls, max_hold: int = 64):
        return cls("typed_fifo", max_hold=max_hold)

    @property
    def bound(self) -> int:
        if self.kind == "fifo":
            return 0
        if self.kind == "bounded":
            return self.eta
        return self.max_hold

    def must_precede(self, earlier: Message, later: Message) -> bool:
        if self.kind == "typed_fifo":
            return earlier.kind == later.kind
        if self.kind == "bounded" and self.control_first:
            return earlier.kind != COMP and later.kind == COMP
        return False

    def label(self) -> str:
        if self.kind == "bounded":
            return f"bounded:{self.eta}" + (":cf" if self.control_first else "")
        if self.kind in ("arbitrary", "typed_fifo"):
            return f"{self.kind}:{self.max_hold}"
        return self.kind


@dataclass(frozen=True)
class DelayModel:
    """Transit-delay distribution, in simulated ticks.

    kind
        ``exp`` (exponential, mean ``mean``), ``uniform`` on
        ``[low, high]``, ``constant`` (``mean``) or ``adversarial``: with
        probability ``p_slow`` a long delay of mean ``mean * slow_factor``,
        otherwise a short one of mean ``mean / slow_factor``.
    control_scale
        Multiplier applied to control-message delays.
    """

    kind: str = "exp"
    mean: float = 1.5
    low: float = 0.1
    high: float = 3.0
    p_slow: float = 0.15
    slow_factor: float = 8.0
    control_scale: float = 1.0
    floor: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("exp", "uniform", "constant", "adversarial"):
            raise ValueError(f"unknown delay model {self.kind!r}")

    def sample(self, rng: np.random.Generator, control: bool) -> float:
        kind = self.kind
        if kind == "exp":
            d = rng.exponential(self.mean)
        elif kind == "uniform":
            d = rng.uniform(self.low, self.high)
        elif kind == "constant":
            d = self.mean
        elif rng.random() < self.p_slow:
            d = rng.exponential(self.mean * self.slow_factor)
        else:
            d = rng.exponential(self.mean / self.slow_factor)
        if control:
            d *= self.control_scale
        return max(float(d), self.floor)

    def label(self) -> str:
        if self.kind == "uniform":
            return f"uniform:{self.low:g}:{self.high:g}"
        return f"{self.kind}:{self.mean:g}"


class EventLog:
    """Ordered record of everything the simulation does.

    Each entry is ``(time, type, src, dst, kind, seq, extra)``.
    """

    def __init__(self):
        self.entries: list[tuple] = []

    def add(self, time, etype, src=-1, dst=-1, kind="", seq=-1, extra=None):
        self.entries.append((time, etype, src, dst, kind, seq, extra))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def of_type(self, etype: str):
        return [e for e in self.entries if e[1] == etype]

    def lines(self) -> Iterable[str]:
        for t, etype, src, dst, kind, seq, extra in self.entries:
            rec = {"time": t, "type": etype, "src": src, "dst": dst, "kind": kind, "seq": seq}
            if extra is not None:
                rec["extra"] = extra
            yield json.dumps(rec, separators=(",", ":"), default=_json_default)

    def dump(self, fh):
        for line in self.lines():
            fh.write(line + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


class _Channel:
    __slots__ = ("policy", "inflight", "next_seq")

    def __init__(self, policy: ChannelPolicy):
        self.policy = policy
        self.inflight: list[Message] = []  # in seq order
        self.next_seq = 0


class Network:
    """Event queue plus directed channels between ``n`` processes.

    Parameters
    ----------
    n : int
        Number of processes.
    policy : ChannelPolicy or dict
        One policy for every channel, or a ``(src, dst) -> policy`` mapping
        with ``default`` as fallback.
    delays : DelayModel
    rng : numpy Generator
        Source of transit delays. Nothing else draws from it.
    delay_override : callable, optional
        ``f(message) -> delay or None``; a non-None value replaces the
        sampled delay (used for scripted traces).
    """

    def __init__(self, n: int, policy: ChannelPolicy | dict = ChannelPolicy(),
                 delays: DelayModel = DelayModel(), rng: np.random.Generator | None = None,
                 delay_override: Callable[[Message], float | None] | None = None,
                 default: ChannelPolicy = ChannelPolicy()):
        if n < 1:
            raise ValueError("need at least one process")
        self.n = n
        self._policy = policy
        self._default = default
        self.delays = delays
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.delay_override = delay_override
        self.time = 0.0
        self.log = EventLog()
        self.reduction_count = 0
        self.sent = 0
        self.delivered = 0
        self.control_sent = 0
        self.control_volume = 0
        self.comp_sent = 0
        self._queue: list = []
        self._counter = 0
        self._channels: dict[tuple[int, int], _Channel] = {}
        self._pending: dict[int, list] = {}  # id(msg) -> heap entry

    def policy_of(self, src: int, dst: int) -> ChannelPolicy:
        if isinstance(self._policy, ChannelPolicy):
            return self._policy
        return self._policy.get((src, dst), self._default)

    def channel(self, src: int, dst: int) -> _Channel:
        ch = self._channels.get((src, dst))
        if ch is None:
            ch = self._channels[(src, dst)] = _Channel(self.policy_of(src, dst))
        return ch

    def _check_pid(self, pid):
        if not (0 <= pid < self.n):
            raise IndexError(f"unknown process id {pid}")

    def _push(self, time, prio, kind, obj):
        self._counter += 1
        entry = [time, prio, self._counter, kind, obj]
        heapq.heappush(self._queue, entry)
        return entry

    def send(self, msg: Message) -> None:
        self._check_pid(msg.src)
        self._check_pid(msg.dst)
        if msg.src == msg.dst:
            raise ValueError("a process does not send to itself")
        ch = self.channel(msg.src, msg.dst)
        msg.seq = ch.next_seq
        ch.next_seq += 1
        msg.sent_at = self.time
        control = msg.kind != COMP
        delay = None
        if self.delay_override is not None:
            delay = self.delay_override(msg)
        if delay is None:
            delay = self.delays.sample(self.rng, control)
        ch.inflight.append(msg)
        self.sent += 1
        if control:
            self.control_sent += 1
            if msg.payload is not None:
                self.control_volume += msg.payload.size
        else:
            self.comp_sent += 1
        self.log.add(self.time, "send", msg.src, msg.dst, msg.kind, msg.seq)
        self._pending[id(msg)] = self._push(self.time + delay, PRIO_DELIVER, "deliver", msg)

    def schedule_tick(self, time: float, k: int) -> None:
        self._push(time, PRIO_TICK, "tick", k)

    def _blocker(self, ch: _Channel, msg: Message) -> Message | None:
        """Oldest in-flight message that prevents delivering ``msg`` now."""
        inflight = ch.inflight
        oldest = inflight[0]
        if oldest is msg:
            return None
        policy = ch.policy
        if msg.seq - oldest.seq > policy.bound:
            return oldest
        for e in inflight:
            if e is msg:
                break
            if policy.must_precede(e, msg):
                return oldest
        return None

    def step(self):
        """Advance by one event: ``("deliver", msg)``, ``("tick", k)`` or ``None`` when done."""
        queue = self._queue
        while queue:
            time, _, _, kind, obj = heapq.heappop(queue)
            self.time = time
            if kind == "tick":
                return ("tick", obj)
            msg = obj
            ch = self._channels[(msg.src, msg.dst)]
            blocker = self._blocker(ch, msg)
            if blocker is not None:
                target = self._pending[id(blocker)][0]
                self._pending[id(msg)] = self._push(max(time, target), PRIO_DELIVER, "deliver", msg)
                continue
            idx = ch.inflight.index(msg)
            for e in ch.inflight[:idx]:
                e.overtaken_by += 1
            msg.overtook = idx
            del ch.inflight[idx]
            del self._pending[id(msg)]
            self.delivered += 1
            self.log.add(time, "deliver", msg.src, msg.dst, msg.kind, msg.seq)
            return ("deliver", msg)
        return None

    def pending_deliveries(self) -> int:
        return len(self._pending)

    def drain(self) -> list[Message]:
        """Deliver every in-flight message, ignoring ticks."""
        out = []
        self._queue = [e for e in self._queue if e[3] == "deliver"]
        heapq.heapify(self._queue)
        while True:
            ev = self.step()
            if ev is None:
                return out
            out.append(ev[1])

    def reduce(self, contributions: Sequence[float], op: str, p: float = 2.0) -> float:
        """Collective combining one contribution per process.

        ``op`` is ``"max"`` or ``"sum-p"``; each call counts one reduction.
        """
        if len(contributions) != self.n or any(c is None for c in contributions):
            raise ProtocolMisuse(
                f"reduction needs one contribution from each of {self.n} processes")
        if op == "max":
            value = 0.0
            for c in contributions:
                if c > value:
                    value = c
        elif op == "sum-p":
            s = 0.0
            for c in contributions:
                s += c ** p
            value = s ** (1.0 / p)
        else:
            raise ValueError(f"unknown reduction {op!r}")
        self.reduction_count += 1
        self.log.add(self.time, "reduce", extra=value)
        return value
