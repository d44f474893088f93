"""Offline verification of finished runs.

The oracle rebuilds every quantity it checks from the run history and the
map's linear form, using its own assembled matrix instead of the block
evaluator the detectors use.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .core import FixedPointMap, NormSpec, residual
from .simnet import COMP, ChannelPolicy

PASS, FAIL, NA = "PASS", "FAIL", "N/A"


@dataclass
class Check:
    name: str
    verdict: str
    measured: float = math.nan
    bound: float = math.nan
    margin: float = math.nan
    detail: str = ""

    @property
    def failed(self) -> bool:
        return self.verdict == FAIL

    def line(self) -> str:
        parts = [self.name, self.verdict, _fmt(self.measured), _fmt(self.bound), _fmt(self.margin)]
        if self.detail:
            parts.append(self.detail)
        return " ".join(parts)


def _fmt(v) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "-"
    return repr(float(v))


@dataclass
class VerificationReport:
    checks: list[Check] = field(default_factory=list)
    reduction_count: int = 0
    control_sent: int = 0
    control_volume: int = 0
    premature: bool = False

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    @property
    def ok(self) -> bool:
        return not any(c.failed for c in self.checks)

    def verdict(self, prefix: str = "") -> str:
        sel = [c for c in self.checks if c.name.startswith(prefix)]
        if any(c.failed for c in sel):
            return FAIL
        if any(c.verdict == PASS for c in sel):
            return PASS
        return NA

    def text(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"reductions {self.reduction_count}")
        lines.append(f"control_messages {self.control_sent} volume {self.control_volume}")
        lines.append(f"premature_termination {int(self.premature)}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check", "verdict", "measured", "bound", "margin", "detail"])
        for c in self.checks:
            w.writerow([c.name, c.verdict, _fmt(c.measured), _fmt(c.bound), _fmt(c.margin), c.detail])
        return buf.getvalue()


class DenseOracle:
    """``f(x) = M x + c`` assembled as one sparse matrix over flat vectors."""

    def __init__(self, f: FixedPointMap):
        form = f.linear_form()
        if form is None:
            raise TypeError("the oracle needs a map with a linear form")
        blocks, c = form
        self.sizes = f.sizes
        self.offsets = np.cumsum([0, *self.sizes])
        n = len(self.sizes)
        grid = [[None] * n for _ in range(n)]
        for (i, j), m in blocks.items():
            grid[i][j] = sparse.csr_matrix(m)
        for i in range(n):
            if all(g is None for g in grid[i]):
                grid[i][i] = sparse.csr_matrix((self.sizes[i], self.sizes[i]))
        # bmat needs every block column represented somewhere
        for j in range(n):
            if all(grid[i][j] is None for i in range(n)):
                grid[j][j] = sparse.csr_matrix((self.sizes[j], self.sizes[j]))
        self.M = sparse.bmat(grid, format="csr")
        self.c = np.concatenate([np.asarray(ci, dtype=float) for ci in c])

    def flat(self, blocks) -> np.ndarray:
        return np.concatenate([np.asarray(b, dtype=float) for b in blocks])

    def block_norms(self, v: np.ndarray) -> np.ndarray:
        o = self.offsets
        return np.array([np.abs(v[o[i]:o[i + 1]]).max() for i in range(len(self.sizes))])

    def norm(self, v: np.ndarray, spec: NormSpec) -> float:
        b = self.block_norms(v)
        if spec.kind == "maxw":
            w = np.asarray(spec.weight_vector(len(b)))
            return float(np.max(b / w))
        return float(np.sum(b ** spec.p) ** (1.0 / spec.p))

    def residual(self, xbar, spec: NormSpec) -> float:
        x = self.flat(xbar)
        return self.norm(self.M @ x + self.c - x, spec)

    def mixed_residual(self, ybar: Sequence, spec: NormSpec) -> float:
        o = self.offsets
        n = len(self.sizes)
        diff = np.empty(o[-1])
        for i in range(n):
            y = self.flat(ybar[i])
            rows = slice(o[i], o[i + 1])
            diff[rows] = self.M[rows] @ y + self.c[rows] - y[rows]
        return self.norm(diff, spec)


_oracle_cache: dict[int, tuple[FixedPointMap, DenseOracle]] = {}


def dense_oracle(f: FixedPointMap) -> DenseOracle:
    hit = _oracle_cache.get(id(f))
    if hit is not None and hit[0] is f:
        return hit[1]
    if len(_oracle_cache) > 64:
        _oracle_cache.clear()
    o = DenseOracle(f)
    _oracle_cache[id(f)] = (f, o)
    return o


def recorded_vectors(record, f: FixedPointMap) -> list[list[np.ndarray]]:
    """Full recorded vector of every process; unread blocks are filled from ``xbar``."""
    xbar = [r.own for r in record.results]
    return [r.vector(xbar) for r in record.results]


def xbar_of(record) -> list[np.ndarray]:
    return [r.own for r in record.results]


def check_snapshot_equality(record, f: FixedPointMap) -> Check:
    """Every recorded copy of block ``j`` equals ``j``'s own recording, bitwise."""
    results = record.results
    if len(results) != f.n or any(r is None for r in results):
        return Check("snapshot_equality", NA, detail="incomplete epoch")
    mismatches = 0
    first = ""
    for r in results:
        for j, b in r.entries.items():
            if b.tobytes() != results[j].own.tobytes():
                mismatches += 1
                if not first:
                    first = f"first=({r.pid},{j})"
    verdict = PASS if mismatches == 0 else FAIL
    return Check("snapshot_equality", verdict, float(mismatches), 0.0, float(-mismatches), first)


def check_reduced_value(record, f: FixedPointMap, spec: NormSpec) -> Check:
    """For a consistent snapshot the reduced value is the exact residual of ``xbar``."""
    if record.decision is None:
        return Check("reduced_equals_exact", NA)
    exact = residual(f, xbar_of(record), spec)
    got = record.decision.value
    same = np.float64(got).tobytes() == np.float64(exact).tobytes()
    return Check("reduced_equals_exact", PASS if same else FAIL, got, exact, exact - got)


def check_prop4_gap(record, f: FixedPointMap, delta_f: float | None, eta: int, p: float,
                    eps: float) -> Check:
    """Exact minus approximated L_p residual against ``n^(1/p) * eta * delta(f) * eps``."""
    if delta_f is None or record.decision is None:
        return Check("prop4_gap", NA, detail="no delta(f)" if delta_f is None else "")
    o = dense_oracle(f)
    spec = NormSpec.lp(p)
    exact = o.residual(xbar_of(record), spec)
    approx = o.mixed_residual(recorded_vectors(record, f), spec)
    gap = exact - approx
    bound = f.n ** (1.0 / p) * eta * delta_f * eps
    if eta == 0:
        ok = gap <= np.spacing(0.0) or gap <= 0.0
    else:
        ok = gap < bound
    return Check("prop4_gap", PASS if ok else FAIL, gap, bound, bound - gap)


def check_prop5(record, f: FixedPointMap, eps_prime: float, weights: Sequence[float]) -> Check:
    """A converged decision must leave the exact weighted-max residual below ``eps_prime``."""
    d = record.decision
    if d is None or not d.converged:
        return Check("prop5_threshold", NA)
    o = dense_oracle(f)
    exact = o.residual(xbar_of(record), NormSpec.max_weighted(weights))
    ok = exact < eps_prime
    return Check("prop5_threshold", PASS if ok else FAIL, exact, eps_prime, eps_prime - exact)


def check_final_residual(record, f: FixedPointMap, spec: NormSpec, eps_prime: float) -> Check:
    """Premature termination: converged while the exact residual is at least ``eps_prime``."""
    d = record.decision
    if d is None or not d.converged:
        return Check("final_residual", NA)
    exact = dense_oracle(f).residual(xbar_of(record), spec)
    return Check("final_residual", PASS if exact < eps_prime else FAIL, exact, eps_prime,
                 eps_prime - exact)


@dataclass
class RhoTables:
    """``rho[(i, j)]`` lists ``(k, rho_j^i(k))`` for every update of ``i`` at tick ``k``."""

    rho: dict[tuple[int, int], list[tuple[int, int]]]
    violations: list[str]

    def monotone(self) -> bool:
        for seq in self.rho.values():
            vals = [r for _, r in seq]
            if any(b < a for a, b in zip(vals, vals[1:])):
                return False
        return True


def extract_rho(history, deps: Sequence[Sequence[int]] | None = None) -> RhoTables:
    """Realized delays from the version stamps of every update.

    The version of block ``j`` produced at tick ``t`` is the component of
    ``x^(t+1)``, so ``rho = t + 1`` (and 0 for the initial value).
    """
    n = len(history.versions)
    rho: dict[tuple[int, int], list] = defaultdict(list)
    violations = []
    own_count = [0] * n
    for k, i, it, _delta, stamps in history.updates:
        cols = range(n) if deps is None else deps[i]
        for j in cols:
            s = stamps[j]
            r = history.version_tick[j][s] + 1
            rho[(i, j)].append((k, r))
            if r > k:
                violations.append(f"rho_{j}^{i}({k})={r}>k")
        if stamps[i] != own_count[i]:
            violations.append(f"process {i} at tick {k} used own version {stamps[i]}, "
                              f"latest is {own_count[i]}")
        own_count[i] += 1
    return RhoTables(dict(rho), violations)


def overtake_counts(deliveries) -> dict[tuple[int, int], dict[int, tuple[str, int]]]:
    """Per channel: seq -> (kind, number of later-sent messages delivered before it)."""
    out: dict = {}
    for ch, seq_kind in _per_channel(deliveries).items():
        order = [s for s, _ in seq_kind]
        kinds = dict(seq_kind)
        counts = {}
        for pos, s in enumerate(order):
            counts[s] = (kinds[s], sum(1 for t in order[:pos] if t > s))
        out[ch] = counts
    return out


def _per_channel(deliveries):
    chans = defaultdict(list)
    for rec in deliveries:
        _t, src, dst, kind, seq = rec[:5]
        chans[(src, dst)].append((seq, kind))
    return chans


def check_policy(deliveries, policy_of) -> Check:
    """Scan delivered sequences against the declared channel policies."""
    bad = 0
    worst = 0
    first = ""
    for ch, seq_kind in _per_channel(deliveries).items():
        pol: ChannelPolicy = policy_of(*ch)
        order = [s for s, _ in seq_kind]
        kinds = dict(seq_kind)
        for pos, s in enumerate(order):
            later_before = [t for t in order[:pos] if t > s]
            earlier_after = [t for t in order[pos + 1:] if t < s]
            worst = max(worst, len(later_before))
            ok = True
            if pol.kind == "fifo":
                ok = not later_before
            elif pol.kind == "bounded":
                ok = len(later_before) <= pol.eta and len(earlier_after) <= pol.eta
                if pol.control_first and kinds[s] != COMP:
                    ok = ok and not any(kinds[t] == COMP for t in later_before)
            elif pol.kind == "typed_fifo":
                ok = not any(kinds[t] == kinds[s] for t in later_before)
                ok = ok and len(later_before) <= pol.max_hold
            else:
                ok = len(later_before) <= pol.max_hold
            if not ok:
                bad += 1
                if not first:
                    first = f"channel={ch[0]}->{ch[1]} seq={s}"
    return Check("policy", PASS if bad == 0 else FAIL, float(worst), math.nan, math.nan, first)


def check_no_loss(history, net_counts: tuple[int, int] | None = None) -> Check:
    """Every sent message was delivered exactly once (after draining)."""
    sends = {(e[2], e[3], e[5]) for e in history.log if e[1] == "send"}
    delivered = [(e[2], e[3], e[5]) for e in history.log if e[1] == "deliver"]
    dup = len(delivered) - len(set(delivered))
    missing = len(sends - set(delivered))
    ok = dup == 0 and missing == 0
    return Check("no_loss", PASS if ok else FAIL, float(missing + dup), 0.0,
                 detail=f"missing={missing} duplicated={dup}")


def check_cls_cut(result) -> Check:
    """Cut consistency and channel completeness of a Chandy-Lamport snapshot.

    A message received before the receiver's recording but sent after the
    sender's recording breaks consistency; a message sent before the
    sender's recording and received after the receiver's recording must be
    in the recorded channel state.
    """
    if not result.epochs:
        return Check("cls_cut", NA, detail="no snapshot")
    rec = result.epochs[-1]
    log = result.history.log.entries
    cut = {}
    for idx, e in enumerate(log):
        if e[1] == "detector" and e[4] == "record_own" and e[2] not in cut:
            cut[e[2]] = idx
    sent_at = {}
    recv_at = {}
    for idx, e in enumerate(log):
        if e[4] != COMP:
            continue
        key = (e[2], e[3], e[5])
        if e[1] == "send":
            sent_at[key] = idx
        elif e[1] == "deliver":
            recv_at[key] = idx
    inconsistent = 0
    lost = []
    recorded = {}
    for r in rec.results:
        for j, msgs in (r.channels or {}).items():
            for seq, _payload in msgs:
                recorded[(j, r.pid, seq)] = True
    for key, s_idx in sent_at.items():
        src, dst, seq = key
        if src not in cut or dst not in cut:
            continue
        r_idx = recv_at.get(key, math.inf)
        if r_idx < cut[dst] and s_idx > cut[src]:
            inconsistent += 1
        if s_idx < cut[src] and r_idx > cut[dst] and key not in recorded:
            lost.append(key)
    bad = inconsistent + len(lost)
    detail = f"inconsistent={inconsistent} lost={len(lost)}"
    if lost:
        detail += f" first_lost={lost[0][0]}->{lost[0][1]}#{lost[0][2]}"
    return Check("cls_cut", PASS if bad == 0 else FAIL, float(bad), 0.0, detail=detail)


def verify(result, eps_prime: float | None = None, spec: NormSpec | None = None,
           delta_f: float | None = None, p: float = 2.0) -> VerificationReport:
    """All checks that apply to ``result``'s protocol, over every completed epoch."""
    from .protocols import APPROXIMATE, EXACT

    cfg = result.config
    f = result.fmap
    spec = spec or cfg.norm
    eps_prime = cfg.threshold if eps_prime is None else eps_prime
    rep = VerificationReport(reduction_count=result.reduction_count,
                             control_sent=result.control_sent,
                             control_volume=result.control_volume)
    proto = cfg.protocol
    if proto == "cls":
        rep.add(check_cls_cut(result))
    decisions = [e for e in result.epochs if e.decision is not None]
    for e in result.completed:
        if proto in EXACT:
            c = check_snapshot_equality(e, f)
            c.name = f"snapshot_equality[{e.epoch}]"
            rep.add(c)
            if proto != "sync":
                c = check_reduced_value(e, f, spec)
                c.name = f"reduced_equals_exact[{e.epoch}]"
                rep.add(c)
        if proto in APPROXIMATE:
            c = check_prop4_gap(e, f, delta_f, cfg.eta, p, cfg.eps)
            c.name = f"prop4_gap[{e.epoch}]"
            rep.add(c)
            if spec.kind == "maxw" and e.decision is not None and e.decision.converged:
                c = check_prop5(e, f, eps_prime, spec.weight_vector(f.n))
                c.name = f"prop5_threshold[{e.epoch}]"
                rep.add(c)
    if proto != "cls":
        ok = result.reduction_count == len(decisions)
        rep.add(Check("single_reduction", PASS if ok else FAIL, float(result.reduction_count),
                      float(len(decisions))))
    if result.converged:
        c = check_final_residual(result.epochs[-1], f, spec, eps_prime)
        rep.premature = c.failed
        rep.add(c)
    if proto == "nfais3":
        rep.add(Check("control_free", PASS if result.control_sent == 0 else FAIL,
                      float(result.control_sent), 0.0))
    rho = extract_rho(result.history, [f.dependency(i) for i in range(f.n)])
    rep.add(Check("causality", PASS if not rho.violations else FAIL,
                  float(len(rho.violations)), 0.0,
                  detail=rho.violations[0] if rho.violations else ""))
    net_policy = cfg.policies or {}
    rep.add(check_policy(result.history.deliveries,
                         lambda s, d: net_policy.get((s, d), cfg.policy)))
    return rep
