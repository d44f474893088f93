"""Command-line experiment runner.

``aisnap run CONFIG`` runs every (protocol, policy, seed) cell of a config
file and writes ``rows.csv``, ``summary.csv`` and ``summary.txt`` to the
output directory, plus an event log and a report for every run with a
failed check. ``aisnap replay LOG --config CONFIG`` re-runs one logged
run and compares it line by line. ``aisnap example-config`` prints a
commented config.

Exit codes: 0 all checks passed, 1 some oracle check failed, 2 bad
configuration, 3 replay diverged.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import NormSpec, delta_coeffs
from .engine import Schedule
from .oracle import verify
from .protocols import DETECTORS, requirement
from .runner import RunConfig, RunResult, simulate, sync_config, thresholds
from .simnet import ChannelPolicy, DelayModel
from .workloads import ConvDiffConfig, SyntheticConfig, build_convdiff, build_synthetic

log = logging.getLogger("aisnap")

COLUMNS = ["protocol", "policy", "eta", "n", "grid", "seed", "steps", "status", "epochs",
           "updates_to_detect", "events", "reductions", "control_messages", "control_volume",
           "final_residual", "threshold", "verdict", "failed_checks"]

SUMMARY_COLUMNS = ["protocol", "policy", "eta", "runs", "converged", "pass_rate",
                   "min_residual", "max_residual", "mean_residual", "mean_epochs",
                   "mean_updates_to_detect", "mean_events"]

EXAMPLE = """\
# aisnap experiment config
[experiment]
# synthetic or convdiff
workload = synthetic
protocols = ais1, ais2, nfais1, nfais2, nfais3, nfais4, nfais5, sync
# fifo | arbitrary[:hold] | typed_fifo[:hold] | bounded:eta[:cf]
# every protocol accepts fifo; see the README for the other pairs
policies = fifo
# random[:prob] | round_robin | sync
schedule = random:0.7
# exp[:mean] | adversarial[:mean] | uniform:low:high | constant:value
delays = exp:1.5
eps_prime = 1e-6
# max | maxw:w1,w2,... | lp:p
norm = max
# a count, a range a-b, or a list a,b,c
seeds = 20
max_ticks = 20000
max_epochs =
# run pairs outside the compatibility matrix
force = false
# which run logs to keep: fail, all or none
logs = fail

[synthetic]
n = 8
alpha = 0.9
block_size = 1
density = 0.0
seed = 0

[convdiff]
grid_n = 12
dims = 3
nu = 0.5
a = 0.1, -0.2, 0.3
dt = 0.01
time_steps = 5
partition = 8
convection = upwind
"""


class ConfigError(ValueError):
    pass


def parse_policy(text: str) -> ChannelPolicy:
    parts = text.strip().split(":")
    kind = parts[0]
    try:
        if kind == "fifo":
            return ChannelPolicy.fifo()
        if kind == "arbitrary":
            return ChannelPolicy.arbitrary(int(parts[1]) if len(parts) > 1 else 64)
        if kind == "typed_fifo":
            return ChannelPolicy.typed_fifo(int(parts[1]) if len(parts) > 1 else 64)
        if kind == "bounded":
            return ChannelPolicy.bounded(int(parts[1]), control_first="cf" in parts[2:])
    except (IndexError, ValueError) as e:
        raise ConfigError(f"bad policy {text!r}: {e}") from None
    raise ConfigError(f"unknown policy {text!r}")


def parse_schedule(text: str) -> Schedule:
    parts = text.strip().split(":")
    if parts[0] == "random":
        return Schedule("random", prob=float(parts[1]) if len(parts) > 1 else 0.7)
    if parts[0] in ("round_robin", "sync"):
        return Schedule(parts[0])
    raise ConfigError(f"unknown schedule {text!r}")


def parse_delays(text: str) -> DelayModel:
    parts = text.strip().split(":")
    kind = parts[0]
    try:
        if kind == "uniform":
            return DelayModel("uniform", low=float(parts[1]), high=float(parts[2]))
        if kind in ("exp", "adversarial", "constant"):
            return DelayModel(kind, mean=float(parts[1])) if len(parts) > 1 else DelayModel(kind)
    except (IndexError, ValueError) as e:
        raise ConfigError(f"bad delay model {text!r}: {e}") from None
    raise ConfigError(f"unknown delay model {text!r}")


def parse_norm(text: str) -> NormSpec:
    text = text.strip()
    if text == "max":
        return NormSpec.max_weighted()
    kind, _, rest = text.partition(":")
    if kind == "maxw":
        return NormSpec.max_weighted([float(w) for w in rest.split(",")])
    if kind == "lp":
        return NormSpec.lp(float(rest))
    raise ConfigError(f"unknown norm {text!r}")


def parse_seeds(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    if "-" in text[1:]:
        a, b = text.split("-", 1)
        return list(range(int(a), int(b) + 1))
    return list(range(int(text)))


def _list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


@dataclass
class ExperimentConfig:
    workload: str = "synthetic"
    protocols: list[str] = field(default_factory=lambda: ["ais1"])
    policies: list[str] = field(default_factory=lambda: ["fifo"])
    schedule: str = "random:0.7"
    delays: str = "exp:1.5"
    eps_prime: float = 1e-6
    norm: str = "max"
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    max_ticks: int = 20000
    max_epochs: int | None = None
    force: bool = False
    logs: str = "fail"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    convdiff: ConvDiffConfig = field(default_factory=ConvDiffConfig)
    output: str = "aisnap-out"

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser) -> "ExperimentConfig":
        if not cp.has_section("experiment"):
            raise ConfigError("config needs an [experiment] section")
        e = cp["experiment"]
        try:
            cfg = cls(
                workload=e.get("workload", "synthetic").strip(),
                protocols=_list(e.get("protocols", "ais1")),
                policies=_list(e.get("policies", "fifo")),
                schedule=e.get("schedule", "random:0.7"),
                delays=e.get("delays", "exp:1.5"),
                eps_prime=e.getfloat("eps_prime", 1e-6),
                norm=e.get("norm", "max"),
                seeds=parse_seeds(e.get("seeds", "10")),
                max_ticks=e.getint("max_ticks", 20000),
                max_epochs=int(e["max_epochs"]) if e.get("max_epochs", "").strip() else None,
                force=e.getboolean("force", False),
                logs=e.get("logs", "fail").strip(),
                output=e.get("output", "aisnap-out").strip(),
            )
            if cp.has_section("synthetic"):
                s = cp["synthetic"]
                cfg.synthetic = SyntheticConfig(
                    n=s.getint("n", 8), alpha=s.getfloat("alpha", 0.9),
                    block_size=s.getint("block_size", 1), density=s.getfloat("density", 0.0),
                    seed=s.getint("seed", 0),
                    weights=tuple(float(w) for w in _list(s["weights"])) if "weights" in s else None)
            if cp.has_section("convdiff"):
                c = cp["convdiff"]
                part = _list(c.get("partition", "8"))
                cfg.convdiff = ConvDiffConfig(
                    grid_n=c.getint("grid_n", 12), dims=c.getint("dims", 3),
                    nu=c.getfloat("nu", 0.5),
                    a=tuple(float(v) for v in _list(c.get("a", "0.1, -0.2, 0.3"))),
                    dt=c.getfloat("dt", 0.01), time_steps=c.getint("time_steps", 5),
                    partition=int(part[0]) if len(part) == 1 else tuple(int(p) for p in part),
                    convection=c.get("convection", "upwind").strip())
        except (ValueError, KeyError) as err:
            raise ConfigError(str(err)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        if not cp.read(path):
            raise ConfigError(f"cannot read config {path}")
        return cls.from_parser(cp)

    @classmethod
    def from_string(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        cp.read_string(text)
        return cls.from_parser(cp)

    def validate(self) -> None:
        if self.workload not in ("synthetic", "convdiff"):
            raise ConfigError(f"unknown workload {self.workload!r}")
        for p in self.protocols:
            if p not in DETECTORS or p == "cls":
                raise ConfigError(f"unknown protocol {p!r}")
        if self.logs not in ("fail", "all", "none"):
            raise ConfigError("logs must be fail, all or none")
        parse_schedule(self.schedule)
        parse_delays(self.delays)
        parse_norm(self.norm)
        for pol in self.policies:
            parse_policy(pol)
        if not self.force:
            for proto in self.protocols:
                for pol in self.policies:
                    why = requirement(proto, parse_policy(pol))
                    if why:
                        raise ConfigError(f"{proto} under {pol}: {why} (set force = true to run anyway)")


@dataclass
class Problem:
    n: int
    grid: str
    maps: object  # callable u_prev -> map, or a single map
    steps: int
    convdiff: object = None
    delta_f: float | None = None


def build_problem(cfg: ExperimentConfig) -> Problem:
    if cfg.workload == "synthetic":
        prob = build_synthetic(cfg.synthetic)
        return Problem(prob.fmap.n, "-", prob.fmap, 1, delta_f=delta_coeffs(prob.fmap).deltaF)
    prob = build_convdiff(cfg.convdiff)
    f0 = prob.map_for(prob.zero())
    return Problem(prob.n, str(cfg.convdiff.grid_n), f0, cfg.convdiff.time_steps, convdiff=prob,
                   delta_f=delta_coeffs(f0).deltaF)


def step_seed(seed: int, step: int) -> int:
    if step == 0:
        return seed
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def run_config(cfg: ExperimentConfig, protocol: str, policy: str, seed: int, n: int) -> RunConfig:
    if protocol == "sync":
        return sync_config(cfg.eps_prime, parse_norm(cfg.norm), cfg.max_ticks, seed)
    pol = parse_policy(policy)
    eta = pol.eta if pol.kind == "bounded" else 0
    spec = parse_norm(cfg.norm)
    eps, thr = thresholds(protocol, cfg.eps_prime, eta, spec, n)
    return RunConfig(protocol=protocol, policy=pol, schedule=parse_schedule(cfg.schedule),
                     delays=parse_delays(cfg.delays), eps=eps, threshold=thr, norm=spec,
                     eta=eta, seed=seed, max_ticks=cfg.max_ticks, max_epochs=cfg.max_epochs)


def cell_hash(cfg: ExperimentConfig, protocol: str, policy: str) -> str:
    """Hash of everything that determines a cell's runs apart from the seed."""
    work = cfg.synthetic if cfg.workload == "synthetic" else cfg.convdiff
    key = json.dumps([cfg.workload, repr(work), protocol, policy, cfg.schedule, cfg.delays,
                      repr(cfg.eps_prime), cfg.norm, cfg.max_ticks, cfg.max_epochs],
                     sort_keys=True)
    return hashlib.sha256(key.encode()).hexdigest()[:16]


@dataclass
class CellRun:
    results: list[RunResult]
    reports: list
    row: dict

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.reports)

    def log_lines(self) -> list[str]:
        out = []
        for step, r in enumerate(self.results):
            out.append(json.dumps({"step": step}))
            out.extend(r.history.log.lines())
        return out

    def report_text(self) -> str:
        parts = []
        for step, rep in enumerate(self.reports):
            parts.append(f"# step {step}\n" + rep.text())
        return "".join(parts)


def run_cell(cfg: ExperimentConfig, problem: Problem, protocol: str, policy: str,
             seed: int) -> CellRun:
    """One seed of one (protocol, policy) cell, over every time step."""
    results, reports = [], []
    if problem.convdiff is not None:
        cd = problem.convdiff
        u = cd.zero()
        fmap = cd.map_for(u)
    else:
        fmap = problem.maps
    for step in range(problem.steps):
        rc = run_config(cfg, protocol, policy, step_seed(seed, step), problem.n)
        x0 = cd.to_blocks(u) if problem.convdiff is not None else None
        res = simulate(fmap, rc, x0)
        p = rc.norm.p if rc.norm.kind == "lp" else 2.0
        rep = verify(res, eps_prime=cfg.eps_prime, delta_f=problem.delta_f, p=p)
        results.append(res)
        reports.append(rep)
        if not res.converged:
            break
        if problem.convdiff is not None and step + 1 < problem.steps:
            u = cd.to_flat([r.own for r in res.epochs[-1].results])
            fmap = cd.map_for(u)
    last = results[-1]
    final = math.nan
    for c in reports[-1].checks:
        if c.name == "final_residual":
            final = c.measured
    failed = sorted({c.name.split("[")[0] for rep in reports for c in rep.checks if c.failed})
    pol = parse_policy(policy)
    row = {
        "protocol": protocol, "policy": pol.label(),
        "eta": pol.eta if pol.kind == "bounded" else 0,
        "n": problem.n, "grid": problem.grid, "seed": seed, "steps": len(results),
        "status": last.status,
        "epochs": sum(len(r.epochs) for r in results),
        "updates_to_detect": sum(max(r.iterations) for r in results),
        "events": sum(r.events for r in results),
        "reductions": sum(r.reduction_count for r in results),
        "control_messages": sum(r.control_sent for r in results),
        "control_volume": sum(r.control_volume for r in results),
        "final_residual": final, "threshold": last.config.threshold,
        "verdict": "PASS" if not failed else "FAIL",
        "failed_checks": ";".join(failed),
    }
    return CellRun(results, reports, row)


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def summarize(rows: list[dict]) -> list[dict]:
    cells: dict = {}
    for r in rows:
        cells.setdefault((r["protocol"], r["policy"], r["eta"]), []).append(r)
    out = []
    for (proto, pol, eta), rs in cells.items():
        res = [r["final_residual"] for r in rs if r["status"] == "converged"
               and not math.isnan(r["final_residual"])]
        out.append({
            "protocol": proto, "policy": pol, "eta": eta, "runs": len(rs),
            "converged": sum(r["status"] == "converged" for r in rs),
            "pass_rate": sum(r["verdict"] == "PASS" for r in rs) / len(rs),
            "min_residual": min(res) if res else math.nan,
            "max_residual": max(res) if res else math.nan,
            "mean_residual": float(np.mean(res)) if res else math.nan,
            "mean_epochs": float(np.mean([r["epochs"] for r in rs])),
            "mean_updates_to_detect": float(np.mean([r["updates_to_detect"] for r in rs])),
            "mean_events": float(np.mean([r["events"] for r in rs])),
        })
    return out


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


_problems: dict = {}


def _problem_for(cfg: ExperimentConfig) -> Problem:
    key = (cfg.workload, repr(cfg.synthetic if cfg.workload == "synthetic" else cfg.convdiff))
    if key not in _problems:
        _problems[key] = build_problem(cfg)
    return _problems[key]


def _task(args) -> CellRun:
    cfg, proto, pol, seed = args
    return run_cell(cfg, _problem_for(cfg), proto, pol, seed)


def run_matrix(cfg: ExperimentConfig, out: Path | None = None, only: dict | None = None,
               jobs: int = 1) -> tuple[list[dict], list[dict]]:
    """Run every cell; write CSVs and logs to ``out`` when given.

    With ``jobs > 1`` runs are spread over worker processes; rows keep the
    serial order, so the output does not depend on ``jobs``.
    """
    only = only or {}
    tasks = [(cfg, proto, pol, seed)
             for proto in cfg.protocols if only.get("protocol", proto) == proto
             for pol in cfg.policies if only.get("policy", pol) == pol
             for seed in cfg.seeds]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "logs").mkdir(exist_ok=True)
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            cells = ex.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs)))
            cells = list(cells)
    else:
        cells = map(_task, tasks)
    rows = []
    for (_, proto, pol, seed), cell in zip(tasks, cells):
        rows.append(cell.row)
        log.info("%s %s seed=%d %s residual=%s", proto, pol, seed, cell.row["verdict"],
                 cell.row["final_residual"])
        keep = cfg.logs == "all" or (cfg.logs == "fail" and not cell.ok)
        if out is not None and keep:
            write_run_log(out / "logs", cell, cell_hash(cfg, proto, pol), proto, pol, seed)
    summary = summarize(rows)
    if out is not None:
        write_csv(out / "rows.csv", COLUMNS, rows)
        write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
        (out / "summary.txt").write_text(summary_text(summary))
    return rows, summary


def log_name(proto: str, pol: str, seed: int) -> str:
    safe = pol.replace(":", "-")
    return f"{proto}_{safe}_{seed}"


def write_run_log(directory: Path, cell: CellRun, h: str, proto: str, pol: str, seed: int) -> Path:
    name = log_name(proto, pol, seed)
    path = directory / f"{name}.log"
    header = {"config_hash": h, "protocol": proto, "policy": pol, "seed": seed}
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": header}) + "\n")
        for line in cell.log_lines():
            fh.write(line + "\n")
    (directory / f"{name}.report").write_text(cell.report_text())
    return path


def summary_text(summary: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"{'protocol':8} {'policy':16} {'runs':>5} {'conv':>5} {'pass':>6} "
              f"{'min r':>10} {'max r':>10} {'mean r':>10} {'epochs':>7} {'updates':>8}\n")
    for s in summary:
        buf.write(f"{s['protocol']:8} {s['policy']:16} {s['runs']:5d} {s['converged']:5d} "
                  f"{s['pass_rate']:6.1%} {s['min_residual']:10.3e} {s['max_residual']:10.3e} "
                  f"{s['mean_residual']:10.3e} {s['mean_epochs']:7.1f} "
                  f"{s['mean_updates_to_detect']:8.1f}\n")
    return buf.getvalue()


class ReplayMismatch(RuntimeError):
    pass


def replay(log_path, cfg: ExperimentConfig) -> CellRun:
    """Re-run the logged cell and compare every line; raise on divergence."""
    lines = Path(log_path).read_text().splitlines()
    if not lines:
        raise ReplayMismatch("empty log")
    try:
        header = json.loads(lines[0])["header"]
    except (ValueError, KeyError):
        raise ReplayMismatch("log has no header line") from None
    proto, pol, seed = header["protocol"], header["policy"], int(header["seed"])
    if proto not in cfg.protocols or pol not in cfg.policies:
        raise ReplayMismatch(f"config hash mismatch: the config has no ({proto}, {pol}) cell")
    h = cell_hash(cfg, proto, pol)
    if h != header["config_hash"]:
        raise ReplayMismatch(f"config hash {h} does not match the log's {header['config_hash']}")
    cell = run_cell(cfg, _problem_for(cfg), proto, pol, seed)
    fresh = cell.log_lines()
    logged = lines[1:]
    for k, (a, b) in enumerate(zip(logged, fresh)):
        if a != b and k == len(logged) - 1 and b.startswith(a):
            raise ReplayMismatch(f"log truncated at line {k + 2}")
        if a != b:
            raise ReplayMismatch(f"first divergence at line {k + 2}: logged {a!r}, replayed {b!r}")
    if len(logged) < len(fresh):
        raise ReplayMismatch(f"log truncated after line {len(logged) + 1}: "
                             f"replay has {len(fresh) - len(logged)} more events")
    if len(logged) != len(fresh):
        k = min(len(logged), len(fresh))
        raise ReplayMismatch(f"first divergence at line {k + 2}: log has {len(logged)} events, "
                             f"replay has {len(fresh)}")
    report = Path(log_path).with_suffix(".report")
    if report.exists() and report.read_text() != cell.report_text():
        raise ReplayMismatch("replayed report differs from the stored report")
    return cell


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aisnap", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment matrix")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--seeds", help="seed override: count, a-b or a,b,c")
    r.add_argument("--protocol", help="only this protocol")
    r.add_argument("--policy", help="only this policy")
    r.add_argument("--logs", choices=("fail", "all", "none"))
    r.add_argument("-j", "--jobs", type=int, default=1, help="worker processes")
    p = sub.add_parser("replay", help="replay a run log")
    p.add_argument("log")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="replay under another seed (must diverge)")
    sub.add_parser("example-config", help="print an example config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(message)s")
    if args.command == "example-config":
        sys.stdout.write(EXAMPLE)
        return 0
    try:
        cfg = ExperimentConfig.load(args.config)
        if getattr(args, "seeds", None):
            cfg.seeds = parse_seeds(args.seeds)
        if getattr(args, "logs", None):
            cfg.logs = args.logs
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.command == "run":
        out = Path(args.out or cfg.output)
        only = {k: v for k, v in (("protocol", args.protocol), ("policy", args.policy)) if v}
        rows, summary = run_matrix(cfg, out, only, args.jobs)
        sys.stdout.write(summary_text(summary))
        failed = [r for r in rows if r["verdict"] == "FAIL"]
        if failed:
            print(f"{len(failed)} of {len(rows)} runs failed an oracle check; logs in {out / 'logs'}",
                  file=sys.stderr)
            return 1
        return 0
    try:
        if args.seed is not None:
            lines = Path(args.log).read_text().splitlines()
            header = json.loads(lines[0])["header"]
            if header["seed"] != args.seed:
                raise ReplayMismatch(f"log was recorded with seed {header['seed']}, not {args.seed}")
        cell = replay(args.log, cfg)
    except ReplayMismatch as e:
        print(f"replay refused: {e}", file=sys.stderr)
        return 3
    sys.stdout.write(cell.report_text())
    return 0 if cell.ok else 1
