"""Experiment harness: configs, convergence metrics, CSV reports, landscapes."""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gridworld import GridEnv, GridIndex, GridSpec, load_map
from .learners import (
    LearnParams,
    LearningTrace,
    run_dyna,
    run_mfpt_dyna,
    run_mfpt_q,
    run_q_learning,
)
from .mdp import ConvergenceParams, TabularMdp, value_change_prioritized_vi, value_iteration
from .reachability import DEFAULT_CLIP, induced_chain, landscape_export, solve_mfpt

ALGORITHMS = ("q", "dyna", "mfpt-q", "mfpt-dyna", "vi", "pvi")
LEARNERS = {
    "q": run_q_learning,
    "dyna": run_dyna,
    "mfpt-q": run_mfpt_q,
    "mfpt-dyna": run_mfpt_dyna,
}
PLANNERS = {"vi": value_iteration, "pvi": value_change_prioritized_vi}

ORACLE_TOL = 1e-10
OPTIMAL_ACTION_TOL = 1e-6
RESULT_HEADER = "algorithm,seed,samples_to_converge,vi_sweeps_total,training_time_proxy,converged"
TIMING_HEADER = "algorithm,seed,wall_clock_ms"


class ConfigError(ValueError):
    pass


class ConfigMismatch(ConfigError):
    pass


@dataclass
class ExperimentConfig:
    map_path: Path
    algorithm: str
    params: LearnParams = field(default_factory=LearnParams)
    seeds: tuple[int, ...] = (0,)
    checkpoint_interval: int = 100
    out_dir: Path = Path("results")
    step_cost: float = 1.0

    def __post_init__(self):
        self.map_path = Path(self.map_path)
        self.out_dir = Path(self.out_dir)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {', '.join(ALGORITHMS)}")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be positive")
        if self.params.checkpoint_interval != self.checkpoint_interval:
            self.params = dataclasses.replace(self.params, checkpoint_interval=self.checkpoint_interval)


_PARAM_TYPES = {f.name: f.type for f in dataclasses.fields(LearnParams)}


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None


def parse_config(text: str, base_dir: Path | str = ".") -> ExperimentConfig:
    """Parse the line-oriented ``key value`` config format.

    ``#`` starts a comment.  Relative ``map`` and ``out`` paths resolve
    against ``base_dir``.  Keys: ``map``, ``algorithm``, ``seeds``,
    ``checkpoint_interval``, ``out``, ``step_cost`` and every
    :class:`LearnParams` field.
    """
    base_dir = Path(base_dir)
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        value = value.strip()
        if not value:
            raise ConfigError(f"line {lineno}: key {key!r} has no value")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value

    for required in ("map", "algorithm"):
        if required not in values:
            raise ConfigError(f"missing required key {required!r}")
    params = {}
    for key, value in values.items():
        if key in ("map", "algorithm", "seeds", "checkpoint_interval", "out", "step_cost"):
            continue
        if key not in _PARAM_TYPES or key == "checkpoint_interval":
            raise ConfigError(f"unknown key {key!r}")
        kind = int if _PARAM_TYPES[key] in (int, "int") else float
        try:
            params[key] = kind(value) if kind is float else int(value)
        except ValueError:
            raise ConfigError(f"key {key!r}: cannot read {value!r} as {kind.__name__}") from None
    try:
        checkpoint_interval = int(values.get("checkpoint_interval", 100))
        step_cost = float(values.get("step_cost", 1.0))
        learn_params = LearnParams(**params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(values.get("out", "results"))
    map_path = Path(values["map"])
    return ExperimentConfig(
        map_path=map_path if map_path.is_absolute() else base_dir / map_path,
        algorithm=values["algorithm"],
        params=learn_params,
        seeds=_parse_seeds(values["seeds"]) if "seeds" in values else (0,),
        checkpoint_interval=checkpoint_interval,
        out_dir=out if out.is_absolute() else base_dir / out,
        step_cost=step_cost,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), path.parent)


@dataclass
class RunMetrics:
    algorithm: str
    seed: int
    samples_to_converge: int | None
    vi_sweeps_total: int
    wall_clock_ms: float
    converge_wall_ms: float | None
    training_time_proxy: float
    samples_consumed: int

    @property
    def converged(self) -> bool:
        return self.samples_to_converge is not None


def quantile(values, q: float) -> float:
    """Linear-interpolated quantile where ``inf`` marks a censored value."""
    xs = sorted(values)
    if not xs:
        return math.nan
    pos = q * (len(xs) - 1)
    lo = math.floor(pos)
    frac = pos - lo
    if frac == 0.0:
        return float(xs[lo])
    hi = xs[lo + 1]
    if math.isinf(hi):
        return math.inf
    return float(xs[lo] + (hi - xs[lo]) * frac)


@dataclass
class MetricsReport:
    algorithm: str
    map_path: Path
    sample_budget: int
    runs: list[RunMetrics] = field(default_factory=list)

    def samples(self) -> list[float]:
        """Samples to converge per run; non-converged runs count as ``inf``."""
        return [math.inf if r.samples_to_converge is None else float(r.samples_to_converge) for r in self.runs]

    def summary(self) -> dict[str, tuple[float, float, float]]:
        """(first quartile, median, third quartile) of each metric."""
        metrics = {
            "samples_to_converge": self.samples(),
            "vi_sweeps_total": [float(r.vi_sweeps_total) for r in self.runs],
            "training_time_proxy": [r.training_time_proxy if r.converged else math.inf for r in self.runs],
            "wall_clock_ms": [r.wall_clock_ms for r in self.runs],
        }
        return {k: (quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75)) for k, v in metrics.items()}

    def median_samples(self) -> float:
        return quantile(self.samples(), 0.5)

    def results_csv(self) -> str:
        lines = [RESULT_HEADER]
        for r in self.runs:
            samples = "NA" if r.samples_to_converge is None else str(r.samples_to_converge)
            lines.append(
                f"{r.algorithm},{r.seed},{samples},{r.vi_sweeps_total},{_fmt(r.training_time_proxy)},{int(r.converged)}"
            )
        return "\n".join(lines) + "\n"

    def timing_csv(self) -> str:
        lines = [TIMING_HEADER]
        lines.extend(f"{r.algorithm},{r.seed},{r.wall_clock_ms:.3f}" for r in self.runs)
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = ["algorithm,metric,q1,median,q3"]
        for metric, (q1, med, q3) in self.summary().items():
            if metric == "wall_clock_ms":
                continue
            lines.append(f"{self.algorithm},{metric},{_fmt(q1)},{_fmt(med)},{_fmt(q3)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path | None = None) -> list[Path]:
        out_dir = Path(out_dir) if out_dir is not None else None
        stem = self.algorithm
        files = {
            f"{stem}.csv": self.results_csv(),
            f"{stem}.timing.csv": self.timing_csv(),
            f"{stem}.summary.csv": self.summary_csv(),
        }
        return _write_files(out_dir, files)


def _fmt(x: float) -> str:
    if math.isinf(x) or math.isnan(x):
        return "NA"
    return repr(float(x))


def _write_files(out_dir: Path, files: dict[str, str]) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in files.items():
        target = out_dir / name
        target.write_text(text, encoding="utf-8")
        written.append(target)
    return written


@dataclass
class Oracle:
    """Exact solution of the true MDP used to judge convergence."""

    mdp: TabularMdp
    v: np.ndarray
    policy: np.ndarray
    optimal: np.ndarray  # (S, A) mask of optimal actions
    judged: np.ndarray  # states whose action is checked
    sweeps: int

    @classmethod
    def solve(cls, mdp: TabularMdp) -> "Oracle":
        v, pi, sweeps = value_iteration(mdp, ConvergenceParams(tolerance=ORACLE_TOL))
        q = mdp.q_values(v)
        optimal = q >= q.max(axis=1, keepdims=True) - OPTIMAL_ACTION_TOL
        judged = mdp.can_reach_goal()
        judged[mdp.goal] = False
        return cls(mdp, v, pi, optimal, judged, sweeps)

    def bellman_residual(self) -> float:
        return float(np.max(np.abs(self.mdp.q_values(self.v).max(axis=1) - self.v)))

    def is_optimal(self, policy) -> bool:
        policy = np.asarray(policy)
        hits = self.optimal[np.arange(len(policy)), policy]
        return bool(hits[self.judged].all())

    def first_converged(self, trace: LearningTrace) -> int | None:
        """Index of the first checkpoint after which every checkpoint is optimal."""
        first = None
        for i in range(len(trace.checkpoints) - 1, -1, -1):
            if not self.is_optimal(trace.checkpoints[i].policy):
                break
            first = i
        return first


def _learn_params(cfg: ExperimentConfig, seed: int) -> LearnParams:
    return dataclasses.replace(cfg.params, seed=seed, checkpoint_interval=cfg.checkpoint_interval)


def _load(cfg: ExperimentConfig) -> GridSpec:
    return load_map(cfg.map_path)


def run_experiment(cfg: ExperimentConfig, spec: GridSpec | None = None, oracle: Oracle | None = None) -> MetricsReport:
    """Run ``cfg.algorithm`` once per seed and judge each run against the oracle."""
    spec = spec if spec is not None else _load(cfg)
    env = GridEnv(spec, cfg.params.gamma)
    if oracle is None:
        oracle = Oracle.solve(env.mdp())
    report = MetricsReport(cfg.algorithm, cfg.map_path, cfg.params.sample_budget)
    for seed in cfg.seeds:
        if cfg.algorithm in PLANNERS:
            t0 = time.perf_counter()
            _, pi, sweeps = PLANNERS[cfg.algorithm](
                oracle.mdp, ConvergenceParams(cfg.params.epsilon_tol, cfg.params.max_sweeps)
            )
            wall = (time.perf_counter() - t0) * 1000.0
            ok = oracle.is_optimal(pi)
            report.runs.append(
                RunMetrics(cfg.algorithm, seed, 0 if ok else None, sweeps, wall, wall if ok else None, 0.0, 0)
            )
            continue
        trace = LEARNERS[cfg.algorithm](env, _learn_params(cfg, seed))
        idx = oracle.first_converged(trace)
        samples = None if idx is None else trace.checkpoints[idx].samples
        used = trace.samples_consumed if samples is None else samples
        report.runs.append(
            RunMetrics(
                algorithm=cfg.algorithm,
                seed=seed,
                samples_to_converge=samples,
                vi_sweeps_total=trace.sweeps_done,
                wall_clock_ms=trace.wall_elapsed * 1000.0,
                converge_wall_ms=None if idx is None else trace.checkpoints[idx].wall_elapsed * 1000.0,
                training_time_proxy=used * cfg.step_cost,
                samples_consumed=trace.samples_consumed,
            )
        )
    return report


@dataclass
class Comparison:
    reports: list[MetricsReport]

    def rows(self) -> list[tuple[str, float, float, float]]:
        """(algorithm, median samples, median wall ms, median sweeps) per config."""
        out = []
        for rep in self.reports:
            summary = rep.summary()
            out.append((rep.algorithm, summary["samples_to_converge"][1], summary["wall_clock_ms"][1], summary["vi_sweeps_total"][1]))
        return out

    def wins(self) -> list[tuple[str, str, int, int, int]]:
        """Paired seed counts ``(a, b, a_wins, b_wins, ties)`` for each pair of configs."""
        out = []
        for i, ra in enumerate(self.reports):
            for rb in self.reports[i + 1:]:
                a_wins = b_wins = ties = 0
                for xa, xb in zip(ra.samples(), rb.samples()):
                    if xa < xb:
                        a_wins += 1
                    elif xb < xa:
                        b_wins += 1
                    else:
                        ties += 1
                out.append((ra.algorithm, rb.algorithm, a_wins, b_wins, ties))
        return out

    def table_csv(self) -> str:
        lines = ["algorithm,median_samples_to_converge,median_vi_sweeps_total,converged_runs,runs"]
        for rep, (alg, med_samples, _, med_sweeps) in zip(self.reports, self.rows()):
            converged = sum(r.converged for r in rep.runs)
            lines.append(f"{alg},{_fmt(med_samples)},{_fmt(med_sweeps)},{converged},{len(rep.runs)}")
        return "\n".join(lines) + "\n"

    def timing_csv(self) -> str:
        lines = ["algorithm,median_wall_clock_ms"]
        lines.extend(f"{alg},{wall:.3f}" for alg, _, wall, _ in self.rows())
        return "\n".join(lines) + "\n"

    def wins_csv(self) -> str:
        lines = ["algorithm_a,algorithm_b,a_wins,b_wins,ties"]
        lines.extend(f"{a},{b},{wa},{wb},{t}" for a, b, wa, wb, t in self.wins())
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path) -> list[Path]:
        files = {
            "comparison.csv": self.table_csv(),
            "comparison.timing.csv": self.timing_csv(),
            "wins.csv": self.wins_csv(),
        }
        return _write_files(Path(out_dir), files)


def compare(cfgs: list[ExperimentConfig]) -> Comparison:
    """Run every config on their shared map and seed list and tabulate them."""
    if not cfgs:
        raise ConfigError("nothing to compare")
    first = cfgs[0]
    for cfg in cfgs[1:]:
        if cfg.map_path.resolve() != first.map_path.resolve():
            raise ConfigMismatch(f"{cfg.map_path} differs from {first.map_path}")
        if cfg.seeds != first.seeds:
            raise ConfigMismatch(f"seed list of {cfg.algorithm} differs from {first.algorithm}")
    spec = _load(first)
    oracles: dict[float, Oracle] = {}
    reports = []
    for cfg in cfgs:
        gamma = cfg.params.gamma
        if gamma not in oracles:
            oracles[gamma] = Oracle.solve(GridEnv(spec, gamma).mdp())
        reports.append(run_experiment(cfg, spec, oracles[gamma]))
    return Comparison(reports)


def landscape_snapshots(cfg: ExperimentConfig, at_samples, seed: int | None = None, spec: GridSpec | None = None):
    """Passage-time vectors of an MFPT learner at the requested sample counts.

    Each snapshot solves the chain induced by the learner's greedy policy
    on its learned model at that moment.  Counts past the end of a run
    that stopped early reuse its final state.  Returns ``{count: MfptVector}``.
    """
    if cfg.algorithm not in ("mfpt-q", "mfpt-dyna"):
        raise ConfigError("landscapes need algorithm mfpt-q or mfpt-dyna")
    spec = spec if spec is not None else _load(cfg)
    env = GridEnv(spec, cfg.params.gamma)
    wanted = sorted(set(int(n) for n in at_samples))
    if any(n < 0 for n in wanted):
        raise ConfigError("sample counts must be non-negative")
    params = _learn_params(cfg, cfg.seeds[0] if seed is None else seed)
    params = dataclasses.replace(params, sample_budget=min(params.sample_budget, max(wanted, default=0)))
    snapshots = {}

    def measure(model, q):
        mdp = model.as_mdp(env.goal, params.gamma)
        chain = induced_chain(mdp, np.argmax(q, axis=1), params.exploration_mix)
        return solve_mfpt(chain, env.goal, params.mu_cap)

    def observe(samples, model, q):
        if samples in wanted:
            snapshots[samples] = measure(model, q)

    learner = LEARNERS[cfg.algorithm]
    trace = learner(env, params, observer=observe)
    final = None
    for n in wanted:
        if n not in snapshots:
            if final is None:
                final = measure(trace.model, trace.q)
            snapshots[n] = final
    return snapshots


def landscape(cfg: ExperimentConfig, at_samples, clip: float = DEFAULT_CLIP, seed: int | None = None) -> list[Path]:
    """Export ``landscape_<count>`` heatmaps and CSVs into ``cfg.out_dir``."""
    spec = _load(cfg)
    grid = GridIndex(spec)
    mask = ~np.isnan(grid.to_grid(np.zeros(len(grid))))
    written = []
    for n, mfpt in sorted(landscape_snapshots(cfg, at_samples, seed, spec).items()):
        written += landscape_export(mfpt, spec.dims, Path(cfg.out_dir) / f"landscape_{n}", clip=clip, mask=mask)
    return written
