"""Asynchronous iteration model: process state, update schedules, local updates."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import FixedPointMap, block_norm
from .simnet import COMP, Message


class NotReady(RuntimeError):
    """Raised when a process is queried before its first update."""


@dataclass(eq=False)
class ProcessState:
    """Local state of process ``pid``.

    ``view[j]`` is the latest known version of block ``j``; ``view[pid]`` is
    always the process's own latest iterate. ``prev_received[j]`` keeps the
    two latest computation messages from ``j`` as
    ``(payload, sender_iter, sender_epoch)``.
    """

    pid: int
    view: list[np.ndarray]
    deps: tuple[int, ...]
    dependents: tuple[int, ...]
    eps: float
    iters: int = 0
    last_delta: float | None = None
    steady: int = 0
    epoch: int = 0
    prev_received: dict[int, deque] = field(default_factory=dict)
    stamps: list[int] = field(default_factory=list)
    bumps: dict[int, np.ndarray] = field(default_factory=dict)
    # channel sequence number of the block in use, per sender
    applied_seq: dict[int, int] = field(default_factory=dict)
    keep_newest: bool = True

    @classmethod
    def initial(cls, pid: int, f: FixedPointMap, x0: Sequence[np.ndarray], eps: float,
                bumps: dict | None = None, keep_newest: bool = True) -> "ProcessState":
        view = []
        for b in x0:
            b = np.array(b, dtype=np.float64)
            b.setflags(write=False)
            view.append(b)
        deps = tuple(j for j in f.dependency(pid) if j != pid)
        p = cls(pid=pid, view=view, deps=deps, dependents=tuple(f.dependents(pid)), eps=eps,
                bumps=dict(bumps or {}), keep_newest=keep_newest)
        for j in deps:
            p.prev_received[j] = deque([(view[j], 0, 0)], maxlen=2)
        p.stamps = [0] * len(view)
        return p


def local_update(p: ProcessState, f: FixedPointMap, send: Callable[[Message], None]) -> np.ndarray:
    """Replace the own block by ``f_i(view)`` and send it to every dependent.

    The computation messages go out before anything else the process sends
    in this activation.
    """
    i = p.pid
    old = p.view[i]
    new = f.eval_block(i, p.view)
    p.iters += 1
    bump = p.bumps.get(p.iters)
    if bump is not None:
        new = new + bump
    if new is old or not isinstance(new, np.ndarray):
        new = np.array(new, dtype=np.float64)
    new.setflags(write=False)
    delta = block_norm(new - old)
    p.view[i] = new
    p.stamps[i] = p.iters
    p.last_delta = delta
    if delta < p.eps:
        p.steady += 1
    else:
        p.steady = 0
    for j in p.dependents:
        send(Message(i, j, COMP, payload=new, sender_iter=p.iters, sender_epoch=p.epoch))
    return new


def on_computation_receive(p: ProcessState, msg: Message) -> bool:
    """Store an arrived block; returns False if it was not put in the view.

    With ``keep_newest`` a block that was overtaken by a later send on the
    same channel does not replace the newer block already in use. The test
    uses the channel's transport sequence number, not the sender's
    iteration stamp. Without it the last delivered block is used.
    """
    if msg.kind != COMP or msg.dst != p.pid:
        raise ValueError(f"process {p.pid} cannot take {msg.kind} message for {msg.dst}")
    j = msg.src
    applied = not (p.keep_newest and msg.seq < p.applied_seq.get(j, -1))
    if applied:
        p.view[j] = msg.payload
        p.stamps[j] = msg.sender_iter
        p.applied_seq[j] = msg.seq
    buf = p.prev_received.get(j)
    if buf is None:
        buf = p.prev_received[j] = deque(maxlen=2)
    buf.append((msg.payload, msg.sender_iter, msg.sender_epoch))
    return applied


def local_converged(p: ProcessState, eps: float | None = None) -> bool:
    """True iff the last own update moved the block by less than ``eps``."""
    if p.last_delta is None:
        raise NotReady(f"process {p.pid} has not updated yet")
    return p.last_delta < (p.eps if eps is None else eps)


@dataclass(frozen=True)
class Schedule:
    """Which processes update at each global tick.

    kind
        ``random`` (each process updates with probability ``probs[i]``,
        ``prob`` when ``probs`` is empty), ``round_robin``, ``sync`` (all
        processes every tick) or ``trace`` (``trace[k % len(trace)]``).
    max_starve
        A process idle for this many ticks is forced to update.
    """

    kind: str = "random"
    prob: float = 0.7
    probs: tuple[float, ...] = ()
    trace: tuple[tuple[int, ...], ...] = ()
    max_starve: int = 20

    def __post_init__(self):
        if self.kind not in ("random", "round_robin", "sync", "trace"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "trace" and not self.trace:
            raise ValueError("trace schedule needs a non-empty trace")

    def label(self) -> str:
        if self.kind == "random":
            return f"random:{self.prob:g}" if not self.probs else "random:custom"
        return self.kind


class Scheduler:
    """Draws the update sets ``I^k`` for a :class:`Schedule`."""

    def __init__(self, schedule: Schedule, n: int, rng: np.random.Generator):
        self.schedule = schedule
        self.n = n
        self.rng = rng
        self.idle = [0] * n
        if schedule.kind == "random":
            probs = schedule.probs or (schedule.prob,) * n
            if len(probs) != n:
                raise ValueError(f"schedule has {len(probs)} probabilities for {n} processes")
            self.probs = np.asarray(probs, dtype=float)

    def update_set(self, k: int) -> list[int]:
        s = self.schedule
        n = self.n
        if s.kind == "sync":
            return list(range(n))
        if s.kind == "round_robin":
            chosen = [k % n]
        elif s.kind == "trace":
            chosen = sorted(set(s.trace[k % len(s.trace)]))
        else:
            draws = self.rng.random(n)
            chosen = [i for i in range(n) if draws[i] < self.probs[i]]
            if not chosen:
                chosen = [int(self.rng.integers(n))]
        if s.kind != "trace":
            forced = [i for i in range(n) if self.idle[i] + 1 >= s.max_starve]
            if forced:
                chosen = sorted(set(chosen) | set(forced))
        for i in range(n):
            self.idle[i] = 0 if i in chosen else self.idle[i] + 1
        return chosen
