"""Command-line experiment runner.

Experiments are described by INI files::

    [problem]
    kind = wb            ; wb | hardcase | bilinear
    m = 3
    n = 5
    cost = squared

    [topology]
    graph = star         ; complete | star | cycle | path | erdos:<p> | file:<edge list>

    [solver]
    method = dmp         ; dmp | dmp_chebyshev | sliding | ibp
    N = 2000
    alpha = auto         ; "auto" or a number, never implied

    [run]
    seed = 10

Exit codes: 0 on success, 2 on a config error, 3 on numeric divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine, hardcase, sliding, topology, wb
from .prox import EntropicSimplex, EuclideanUnconstrained

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

PROBLEMS = ("wb", "hardcase", "bilinear")
METHODS = ("dmp", "dmp_chebyshev", "sliding", "ibp")
COMPARISON_HEADER = ("topology", "chi", "final_gap", "final_consensus_x", "final_consensus_y",
                     "comm_rounds", "oracle_calls")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment config."""


class Diverged(RuntimeError):
    """Run finished but recorded divergence events; carries its outputs."""

    def __init__(self, msg: str, report, summary: dict):
        super().__init__(msg)
        self.report = report
        self.summary = summary


# ----------------------------------------------------------------------------
# config parsing


@dataclass
class Section:
    name: str
    data: dict[str, str]

    def raw(self, key: str, default: str | None = None) -> str:
        if key in self.data:
            return self.data[key].strip()
        if default is None:
            raise ConfigError(f"[{self.name}] missing required field '{key}'")
        return default

    def has(self, key: str) -> bool:
        return key in self.data

    def get_int(self, key: str, default: int | None = None) -> int:
        v = self.raw(key, None if default is None else str(default))
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"[{self.name}] field '{key}': expected an integer, got {v!r}") from None

    def get_float(self, key: str, default: float | None = None) -> float:
        v = self.raw(key, None if default is None else repr(default))
        try:
            out = float(v)
        except ValueError:
            raise ConfigError(f"[{self.name}] field '{key}': expected a number, got {v!r}") from None
        if not math.isfinite(out):
            raise ConfigError(f"[{self.name}] field '{key}': must be finite")
        return out

    def get_auto(self, key: str) -> float | None:
        """Required numeric field that may be spelled ``auto``."""
        if self.raw(key).lower() == "auto":
            return None
        return self.get_float(key)

    def choice(self, key: str, options, default: str | None = None) -> str:
        v = self.raw(key, default)
        if v not in options:
            raise ConfigError(f"[{self.name}] field '{key}': {v!r} not in {list(options)}")
        return v


@dataclass
class ExperimentConfig:
    problem: Section
    topology: Section
    solver: Section
    seed: int
    base_dir: Path

    @property
    def kind(self) -> str:
        return self.problem.choice("kind", PROBLEMS)

    @property
    def method(self) -> str:
        return self.solver.choice("method", METHODS)

    def path(self, sec: Section, key: str) -> Path:
        p = Path(sec.raw(key))
        p = p if p.is_absolute() else self.base_dir / p
        if not p.is_file():
            raise ConfigError(f"[{sec.name}] field '{key}': file {p} does not exist")
        return p


def parse_config(text: str, base_dir: Path | str = ".", seed: int | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (N vs n)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc}") from None
    for name in ("problem", "topology", "solver", "run"):
        if not cp.has_section(name):
            raise ConfigError(f"missing section [{name}]")
    secs = {name: Section(name, dict(cp[name])) for name in cp.sections()}
    run = secs["run"]
    cfg_seed = run.get_int("seed") if seed is None else int(seed)
    if cfg_seed < 0:
        raise ConfigError("[run] field 'seed': must be >= 0")
    cfg = ExperimentConfig(secs["problem"], secs["topology"], secs["solver"], cfg_seed, Path(base_dir))
    cfg.problem.choice("kind", PROBLEMS)
    cfg.solver.choice("method", METHODS)
    return cfg


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), path.parent, seed)


# ----------------------------------------------------------------------------
# building blocks


def build_topology(cfg: ExperimentConfig, m: int, override: str | None = None) -> topology.Graph:
    spec = override if override is not None else cfg.topology.raw("graph")
    if spec.startswith("file:"):
        p = Path(spec[5:])
        p = p if p.is_absolute() else cfg.base_dir / p
        if not p.is_file():
            raise ConfigError(f"[topology] field 'graph': file {p} does not exist")
        g = topology.read_edge_list(p)
        if g.node_count != m:
            raise ConfigError(f"[topology] edge list has {g.node_count} nodes, problem has {m}")
    else:
        g = topology.parse_topology(spec, m, seed=cfg.seed)
    if not g.is_connected():
        raise ConfigError(f"[topology] graph {spec!r} is disconnected")
    return g


def build_mixer(cfg: ExperimentConfig, g: topology.Graph):
    w = topology.laplacian(g)
    if cfg.method == "dmp_chebyshev":
        k = cfg.solver.raw("K")
        deg = None if k.lower() == "auto" else cfg.solver.get_int("K")
        return topology.chebyshev_mixer(w, deg)
    return w


def build_wb_instance(cfg: ExperimentConfig) -> wb.WbInstance:
    pr = cfg.problem
    if pr.has("measures_file") or pr.has("cost_file"):
        return wb.load_instance(cfg.path(pr, "measures_file"), cfg.path(pr, "cost_file"))
    m, n = pr.get_int("m"), pr.get_int("n")
    try:
        return wb.random_instance(m, n, seed=cfg.seed, cost=pr.raw("cost"))
    except ValueError as exc:
        raise ConfigError(f"[problem] {exc}") from None


def build_hardcase(cfg: ExperimentConfig, g: topology.Graph) -> hardcase.HardInstance:
    pr = cfg.problem
    B = [int(b) for b in pr.raw("B").split(",") if b.strip()]
    try:
        return hardcase.hard_instance(pr.get_float("L"), pr.get_float("eps"), pr.get_float("R"),
                                      pr.get_int("d"), g, B, pr.get_int("rho"))
    except ValueError as exc:
        raise ConfigError(f"[problem] {exc}") from None


def build_bilinear(cfg: ExperimentConfig) -> engine.SaddleProblem:
    """Random matrix game per node over simplices, drawn from the run seed."""
    pr = cfg.problem
    m, dx, dy = pr.get_int("m"), pr.get_int("dx"), pr.get_int("dy")
    rng = np.random.default_rng(cfg.seed)
    K = rng.uniform(-1.0, 1.0, size=(m, dx, dy))
    maps = {"x": EntropicSimplex(dx), "p": EuclideanUnconstrained(0),
            "y": EntropicSimplex(dy), "q": EuclideanUnconstrained(0)}
    return engine.bilinear_problem(K, np.zeros((m, dx)), np.zeros((m, dy)), maps, name="bilinear")


def node_count(cfg: ExperimentConfig) -> int:
    pr = cfg.problem
    if cfg.kind == "wb" and (pr.has("measures_file") or pr.has("cost_file")):
        return wb.read_matrix(cfg.path(pr, "measures_file")).shape[0]
    m = pr.get_int("m")
    if m < 1:
        raise ConfigError("[problem] field 'm': must be >= 1")
    return m


# ----------------------------------------------------------------------------
# runners


def _iterations(cfg: ExperimentConfig) -> int:
    N = cfg.solver.get_int("N")
    if N < 1:
        raise ConfigError("[solver] field 'N': must be >= 1")
    return N


def _log_every(cfg: ExperimentConfig) -> int | None:
    return cfg.solver.get_int("log_every") if cfg.solver.has("log_every") else None


def _run_wb(cfg, inst, w, N):
    alpha = cfg.solver.get_auto("alpha")
    preset = cfg.solver.choice("preset", ("literal", "weighted"), "literal")
    sc = wb.WbSolverConfig.from_instance(inst, w, N, preset=preset, alpha=alpha, log_every=_log_every(cfg))
    xs, report = wb.dmp_wb_run(inst, w, sc)
    obj = wb.barycenter_objective(inst, xs.mean(axis=0))
    return report, {"alpha": sc.alpha, "preset": preset, "objective": obj}


def _run_engine(cfg, problem, w, N):
    alpha = cfg.solver.get_auto("alpha")
    ecfg = engine.auto_config(problem, w, N, log_every=_log_every(cfg))
    if alpha is not None:
        if not alpha > 0:
            raise ConfigError("[solver] field 'alpha': must be positive")
        ecfg.alpha = alpha
    _, report = engine.decentralized_mirror_prox(problem, w, ecfg)
    return report, {"alpha": ecfg.alpha, "L_zeta": ecfg.L_zeta}


def _run_sliding(cfg, inst: hardcase.HardInstance, w, N):
    problem = inst.saddle_problem()
    sv = cfg.solver
    eps = sv.get_float("eps")
    M = max(problem.M_x, problem.M_y)
    lam = w.lambda_min_pos
    g = sv.get_auto("gamma")
    gamma = sliding.gamma_for(eps, inst.mu, lam, M) if g is None else g
    a = sv.get_auto("alpha")
    alpha = sliding.alpha_for(eps, gamma, lam, M) if a is None else a
    if not (gamma > 0 and alpha > 0):
        raise ConfigError("[solver] sliding needs gamma > 0 and alpha > 0")
    op, st, proj = sliding.regularize_saddle(problem, w, gamma, alpha, inst.mu)
    scfg = sliding.SlidingConfig.from_constants(op.L_A, op.L_B, op.mu_g, eps, outer_N=N, alpha=alpha, gamma=gamma)
    report = engine.RunReport()
    rounds = w.rounds_per_apply

    def cb(k, zeta):
        x, _, _, y, _, _ = st.split(zeta)
        cx = float(np.linalg.norm(w.apply(x)))
        cy = float(np.linalg.norm(w.apply(y)))
        report.rows.append((k, None, cx, cy, op.n_B * rounds, op.n_A * problem.m))

    res = sliding.sliding_run(op, np.zeros(st.size), scfg, proj, callback=cb)
    return report, {"eta": scfg.eta, "delta": scfg.delta, "inner_T": scfg.inner_T, "gamma": gamma,
                    "alpha": alpha, "n_A": res.n_A, "n_B": res.n_B}


def _run_ibp(cfg, inst, N):
    gamma = cfg.solver.get_float("gamma")
    if not gamma > 0:
        raise ConfigError("[solver] field 'gamma': must be positive")
    res = wb.ibp_baseline(inst, gamma, N)
    report = engine.RunReport()
    for k, val in enumerate(res.trace, start=1):
        report.rows.append((k, None, 0.0, 0.0, 0, k * inst.m))
    extra = {"gamma": gamma, "divergence_events": len(res.events)}
    for j, (it, msg) in enumerate(res.events):
        extra[f"event_{j}"] = f"iter {it}: {msg}"
    if res.trace:
        extra["objective"] = res.trace[-1]
    return report, extra


def run_experiment(cfg: ExperimentConfig, topology_override: str | None = None):
    """Run one experiment; returns ``(report, summary dict)``."""
    kind, method = cfg.kind, cfg.method
    N = _iterations(cfg)
    m = node_count(cfg)
    g = build_topology(cfg, m, topology_override)
    w = build_mixer(cfg, g)
    summary: dict = {"problem": kind, "method": method, "m": m, "seed": cfg.seed,
                     "chi": topology.laplacian(g).chi if m > 1 else 1.0}
    if method == "ibp":
        if kind != "wb":
            raise ConfigError(f"solver/problem mismatch: ibp needs a wb problem, got {kind}")
        report, extra = _run_ibp(cfg, build_wb_instance(cfg), N)
    elif method == "sliding":
        if kind != "hardcase":
            raise ConfigError(f"solver/problem mismatch: sliding needs a strongly monotone problem "
                              f"(hardcase), got {kind}")
        report, extra = _run_sliding(cfg, build_hardcase(cfg, g), w, N)
    elif kind == "wb":
        report, extra = _run_wb(cfg, build_wb_instance(cfg), w, N)
    elif kind == "hardcase":
        report, extra = _run_engine(cfg, build_hardcase(cfg, g).saddle_problem(), w, N)
    else:
        report, extra = _run_engine(cfg, build_bilinear(cfg), w, N)
    summary.update(report.summary())
    summary.update(extra)
    if summary.get("divergence_events"):
        raise Diverged(summary.get("event_0", "divergence"), report, summary)
    return report, summary


# ----------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def summary_line(summary: dict) -> str:
    """One-line digest: final gap, consensus, comm rounds and oracle calls."""
    keys = ("final_gap", "final_consensus_x", "final_consensus_y", "comm_rounds", "oracle_calls")
    return " ".join(f"{k}={_fmt(summary.get(k))}" for k in keys)


def write_summary(path: Path, summary: dict) -> None:
    lines = [summary_line(summary)] + [f"{k}={_fmt(v)}" for k, v in summary.items()]
    path.write_text("\n".join(lines) + "\n")


def write_plot(path: Path, report: engine.RunReport, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "dmprox"
    gaps = report.gaps()
    its = report.column("iter")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    gk = [k for k in sorted(gaps) if gaps[k] > 0]
    if gk:
        ax1.semilogy(gk, [gaps[k] for k in gk])
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("duality gap")
    for name, label in (("consensus_x", "||W x||"), ("consensus_y", "||W y||")):
        col = report.column(name)
        pts = [(k, v) for k, v in zip(its, col) if v > 0]
        if pts:
            ax2.semilogy(*zip(*pts), label=label)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("consensus residual")
    if ax2.get_legend_handles_labels()[0]:
        ax2.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit(out: Path, report, summary, plot: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    write_summary(out / "summary.txt", summary)
    if plot:
        write_plot(out / "plot.svg", report, f"{summary['problem']} / {summary['method']}")


def topology_sweep(cfg: ExperimentConfig, specs: list[str], out: Path) -> list[dict]:
    """Run ``cfg`` once per topology; writes per-topology output and a
    comparison table sorted by ``chi``."""
    results = []
    for spec in specs:
        report, summary = run_experiment(cfg, spec)
        emit(out / spec.replace(":", "_"), report, summary)
        results.append((spec, summary))
    results.sort(key=lambda r: (r[1]["chi"], r[0]))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(COMPARISON_HEADER)
    for spec, s in results:
        wr.writerow([spec] + [_fmt(s.get(k)) for k in COMPARISON_HEADER[1:]])
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(buf.getvalue())
    return [s for _, s in results]


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dmprox", description="Decentralized Mirror-Prox experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None, help="override [run] seed")
    r.add_argument("--plot", action="store_true", help="also write plot.svg")
    s = sub.add_parser("sweep", help="run one experiment per topology")
    s.add_argument("--config", required=True)
    s.add_argument("--topologies", required=True, help="comma-separated, e.g. complete,star,erdos:0.5")
    s.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.command == "run":
            cfg = load_config(args.config, args.seed)
            report, summary = run_experiment(cfg)
            emit(out, report, summary, args.plot)
            print(summary_line(summary))
        else:
            cfg = load_config(args.config)
            specs = [t.strip() for t in args.topologies.split(",") if t.strip()]
            if not specs:
                print("warning: empty topology list, nothing to do", file=sys.stderr)
                return EXIT_OK
            for s in topology_sweep(cfg, specs, out):
                print(summary_line(s))
    except (ConfigError, topology.TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Diverged as exc:
        emit(out, exc.report, exc.summary)
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except engine.NumericDivergence as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
