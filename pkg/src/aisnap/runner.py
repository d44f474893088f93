"""Single simulated run: processes, network and detector wired together."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import BlockVector, FixedPointMap, NormSpec, adjusted_threshold
from .engine import ProcessState, Schedule, Scheduler, local_update, on_computation_receive
from .protocols import (APPROXIMATE, Decision, SnapshotResult, evaluate_and_decide,
                        make_detector)
from .simnet import COMP, ChannelPolicy, DelayModel, Message, Network


@dataclass
class RunConfig:
    """Parameters of one simulated run.

    ``eps`` is the local-convergence threshold and ``threshold`` the value
    the reduced residual must stay below; :func:`thresholds` derives both
    from the target residual.
    """

    protocol: str
    policy: ChannelPolicy = field(default_factory=ChannelPolicy)
    schedule: Schedule = field(default_factory=Schedule)
    delays: DelayModel = field(default_factory=DelayModel)
    eps: float = 1e-6
    threshold: float = 1e-6
    norm: NormSpec = field(default_factory=NormSpec)
    eta: int = 0
    seed: int = 0
    max_ticks: int = 20000
    max_epochs: int | None = None
    initiators: tuple[int, ...] = (0,)
    bumps: dict = field(default_factory=dict)
    delay_override: Callable[[Message], float | None] | None = None
    policies: dict | None = None
    keep_newest: bool = True


def thresholds(protocol: str, eps_prime: float, eta: int, spec: NormSpec, n: int,
               adjust: bool = True) -> tuple[float, float]:
    """``(local eps, decision threshold)`` for a target residual ``eps_prime``.

    Bounded-crossing detectors under a weighted max norm use the adjusted
    threshold for both; everything else uses ``eps_prime``. With weights
    below one the adjustment divides by ``1 + eta / min(w)`` instead, which
    is the larger correction in that case.
    """
    if protocol in APPROXIMATE and adjust and spec.kind == "maxw":
        w = spec.weight_vector(n)
        wmin = min(w)
        if wmin >= 1:
            eps = adjusted_threshold(eps_prime, eta, w)
        else:
            eps = eps_prime / (1 + eta / wmin)
        return eps, eps
    return eps_prime, eps_prime


@dataclass
class EpochRecord:
    epoch: int
    results: list[SnapshotResult]
    decision: Decision | None
    time: float


@dataclass
class RunHistory:
    """What the oracle needs to rebuild the computation.

    ``versions[j][s]`` is the ``s``-th version of block ``j`` (``s = 0`` is
    the initial value) and ``version_tick[j][s]`` the tick that produced it
    (-1 for ``s = 0``). ``updates`` holds
    ``(tick, pid, own iteration, delta, view stamps)`` per update, where the
    stamps are the versions of every block in the view that was used.
    """

    versions: list[list[np.ndarray]]
    version_tick: list[list[int]]
    updates: list[tuple]
    log: object
    deliveries: list[tuple] = field(default_factory=list)


@dataclass
class RunResult:
    config: RunConfig
    fmap: FixedPointMap
    status: str
    epochs: list[EpochRecord]
    history: RunHistory
    reduction_count: int
    ticks: int
    iterations: list[int]
    events: int
    control_sent: int
    control_volume: int
    comp_sent: int
    n_sent: int
    n_delivered: int
    transcript: list[tuple]

    @property
    def completed(self) -> list[EpochRecord]:
        return [e for e in self.epochs if len(e.results) == self.fmap.n]

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final(self) -> EpochRecord | None:
        return self.epochs[-1] if self.epochs and self.epochs[-1].decision else None


class Simulation:
    """Runs one protocol on one map until convergence or a cap is hit."""

    def __init__(self, fmap: FixedPointMap, cfg: RunConfig, x0: Sequence | None = None):
        self.f = fmap
        self.cfg = cfg
        n = fmap.n
        if x0 is None:
            x0 = [np.zeros(d) for d in fmap.sizes]
        x0 = list(x0.blocks if isinstance(x0, BlockVector) else x0)
        ss = np.random.SeedSequence(cfg.seed)
        sched_seed, delay_seed = ss.spawn(2)
        schedule = cfg.schedule
        self.scheduler = Scheduler(schedule, n, np.random.default_rng(sched_seed))
        policy = cfg.policies if cfg.policies is not None else cfg.policy
        self.net = Network(n, policy, cfg.delays, np.random.default_rng(delay_seed),
                           cfg.delay_override, default=cfg.policy)
        self.time = 0.0
        self.procs = [ProcessState.initial(i, fmap, x0, cfg.eps, cfg.bumps.get(i),
                                           cfg.keep_newest)
                      for i in range(n)]
        self.detectors = [make_detector(cfg.protocol, p, self, cfg.eta, cfg.initiators)
                          for p in self.procs]
        self.epoch = 0
        self.returned_count = 0
        self.epochs: list[EpochRecord] = []
        self.transcript: list[tuple] = []
        self.history = RunHistory(
            versions=[[p.view[p.pid]] for p in self.procs],
            version_tick=[[-1] for _ in range(n)],
            updates=[], log=self.net.log)
        self.status = "running"

    # context interface for detectors
    def send_control(self, msg: Message) -> None:
        self.net.send(msg)

    def trace(self, pid: int, action: str, detail=None) -> None:
        rec = (self.time, pid, action, self.epoch, detail)
        self.transcript.append(rec)
        self.net.log.add(self.time, "detector", pid, -1, action, self.epoch, detail)

    def returned(self, pid: int) -> None:
        self.returned_count += 1

    def _evaluate(self) -> None:
        results = [d.result for d in self.detectors]
        if self.cfg.protocol == "cls":
            self.epochs.append(EpochRecord(self.epoch, results, None, self.time))
            self.status = "snapshot"
            return
        decision = evaluate_and_decide(results, self.f, self.cfg.norm, self.cfg.threshold,
                                       self.net)
        self.net.log.add(self.time, "decision", extra=[decision.value, decision.converged])
        self.epochs.append(EpochRecord(self.epoch, results, decision, self.time))
        if decision.converged:
            self.status = "converged"
            return
        if self.cfg.max_epochs is not None and len(self.epochs) >= self.cfg.max_epochs:
            self.status = "epoch_cap"
            return
        self.epoch += 1
        self.returned_count = 0
        for p, d in zip(self.procs, self.detectors):
            p.epoch = self.epoch
            d.reset(self.epoch)

    def _after_hook(self) -> None:
        if self.returned_count == self.f.n:
            self._evaluate()

    def run(self) -> RunResult:
        net = self.net
        f = self.f
        procs = self.procs
        dets = self.detectors
        hist = self.history
        send = net.send
        reads = [d.reads_stamps for d in dets]
        net.schedule_tick(0.0, 0)
        ticks = 0
        while self.status == "running":
            ev = net.step()
            if ev is None:
                self.status = "stalled"
                break
            self.time = net.time
            kind, obj = ev
            if kind == "tick":
                k = obj
                if k >= self.cfg.max_ticks:
                    self.status = "capped"
                    break
                ticks = k + 1
                for i in self.scheduler.update_set(k):
                    p = procs[i]
                    d = dets[i]
                    d.before_update()
                    stamps = tuple(p.stamps)
                    new = local_update(p, f, send)
                    hist.versions[i].append(new)
                    hist.version_tick[i].append(k)
                    hist.updates.append((k, i, p.iters, p.last_delta, stamps))
                    net.log.add(self.time, "update", i, -1, "", p.iters, p.last_delta)
                    d.on_local_update()
                    self._after_hook()
                    if self.status != "running":
                        break
                else:
                    net.schedule_tick(float(k + 1), k + 1)
            else:
                msg = obj
                j = msg.dst
                hist.deliveries.append((self.time, msg.src, j, msg.kind, msg.seq,
                                        msg.sender_iter, msg.overtaken_by, msg.overtook))
                if msg.kind == COMP:
                    on_computation_receive(procs[j], msg)
                    stamp = (msg.sender_iter, msg.sender_epoch) if reads[j] else None
                    dets[j].on_computation(msg.src, msg.payload, msg.seq, stamp)
                else:
                    dets[j].on_control(msg)
                self._after_hook()
        return RunResult(
            config=self.cfg, fmap=f, status=self.status, epochs=self.epochs, history=hist,
            reduction_count=net.reduction_count, ticks=ticks,
            iterations=[p.iters for p in procs], events=len(net.log),
            control_sent=net.control_sent, control_volume=net.control_volume,
            comp_sent=net.comp_sent, n_sent=net.sent, n_delivered=net.delivered,
            transcript=self.transcript)


def simulate(fmap: FixedPointMap, cfg: RunConfig, x0=None) -> RunResult:
    return Simulation(fmap, cfg, x0).run()


def sync_config(eps_prime: float, norm: NormSpec, max_ticks: int = 100000, seed: int = 0) -> RunConfig:
    """Synchronous iterations with a global residual test after every sweep."""
    return RunConfig(protocol="sync", policy=ChannelPolicy.fifo(), schedule=Schedule("sync"),
                     delays=DelayModel("constant", mean=0.5), eps=eps_prime,
                     threshold=eps_prime, norm=norm, seed=seed, max_ticks=max_ticks)
