"""Quadratic-reward simulation study: MOCU policy vs knowledge gradient.

A hidden quadratic reward ``f(psi) = t1 psi^2 + t2 psi + t3`` with noise
``N(0, t4^2)`` is sampled per run; both policies start from the same four
randomly chosen grid actions with the same noisy observations, then run a
fixed number of design iterations.  The MOCU policy carries the exact
functional form through a normal-inverse-gamma posterior; the KG
comparator refits a Gaussian process (quadratic mean, squared-exponential
kernel) and applies the knowledge-gradient rule to the resulting
correlated Gaussian belief.

Performance metric: opportunity cost, the true best grid reward minus the
true reward of the action each policy would commit to at that iteration.
Observation noise uses common random numbers keyed by (run, iteration,
action) so that policy comparisons are paired; all randomness derives
from the master seed, making CSV outputs byte-reproducible.
"""

from __future__ import annotations

import csv
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import core
from .beliefs import CorrelatedGaussianBelief, NigLinearBelief, quadratic_basis
from .gpr import fit_gpr, gpr_posterior
from .policies import kg_policy

__all__ = [
    "EpisodeRecord",
    "IterationRow",
    "QuadraticRewardProblem",
    "SimConfig",
    "TrueModel",
    "aggregate",
    "plot_aggregate",
    "run_benchmark",
    "run_episode",
    "sample_true_model",
    "write_aggregate_csv",
    "write_raw_csv",
]

# RNG stream tags (distinct first components after the master seed)
_STREAM_MODEL = 11
_STREAM_INIT = 12
_STREAM_NOISE = 13
_STREAM_DESIGN = 14
_STREAM_GPR = 15

DEFAULT_GRID = tuple(0.5 * k for k in range(1, 21))

RAW_HEADER = ("run_id", "policy", "iteration", "experiment_idx", "outcome",
              "best_action_idx", "opportunity_cost")
AGG_HEADER = ("policy", "iteration", "mean_oc", "stderr", "n_runs")


@dataclass(frozen=True)
class SimConfig:
    """Study configuration; defaults are the desk-scale setup (200 runs).

    Raising ``runs`` to 1000 reproduces the full-scale study.
    """

    grid: tuple[float, ...] = DEFAULT_GRID
    runs: int = 200
    iterations: int = 5
    initial_actions: int = 4
    n_theta_samples: int = 256
    n_outcome_samples: int = 64
    master_seed: int = 0
    policies: tuple[str, ...] = ("mocu", "kg")
    gpr_restarts: int = 5
    shared_noise: bool = True
    parallelism: int = 1

    def __post_init__(self):
        if len(self.grid) < 2 or any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("grid must be strictly increasing with >= 2 points")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (3 <= self.initial_actions <= len(self.grid)):
            raise ValueError("initial_actions must be in [3, len(grid)]")
        unknown = set(self.policies) - {"mocu", "kg"}
        if unknown:
            raise ValueError(f"unknown policies {sorted(unknown)}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    @property
    def config_key(self) -> str:
        payload = (self.grid, self.runs, self.iterations, self.initial_actions,
                   self.n_theta_samples, self.n_outcome_samples,
                   self.master_seed, self.policies, self.gpr_restarts,
                   self.shared_noise)
        return repr(payload)


@dataclass(frozen=True)
class TrueModel:
    """Ground-truth quadratic reward with its noise scale and grid rewards."""

    theta1: float
    theta2: float
    theta3: float
    theta4: float
    rewards: tuple[float, ...]

    @property
    def best_reward(self) -> float:
        return max(self.rewards)


def sample_true_model(rng: np.random.Generator, grid) -> TrueModel:
    """Draw a ground truth: t1 ~ U(-5,2), t2 = -2 t1 r with r ~ U(-2.5,13),
    t3 ~ U(-5,5), and t4 = w * sigma(f) with w ~ U(0.075, 0.7), where
    sigma(f) is the population standard deviation of the grid rewards.
    Degenerate (constant-reward) draws are resampled."""
    g = np.asarray(grid, dtype=float)
    while True:
        t1 = rng.uniform(-5.0, 2.0)
        r = rng.uniform(-2.5, 13.0)
        t2 = -2.0 * t1 * r
        t3 = rng.uniform(-5.0, 5.0)
        rewards = t1 * g**2 + t2 * g + t3
        sigma_f = float(rewards.std())
        if sigma_f > 0.0:
            break
    t4 = sigma_f * rng.uniform(0.075, 0.7)
    return TrueModel(float(t1), float(t2), float(t3), float(t4),
                     tuple(float(v) for v in rewards))


class QuadraticRewardProblem(core.DesignProblem):
    """Grid actions with cost = negated quadratic reward, NIG-conjugate experiments."""

    def __init__(self, grid):
        self.grid = np.asarray(grid, dtype=float)
        self.basis = quadratic_basis(self.grid)
        self.actions = core.ActionSet([f"psi={v:g}" for v in self.grid])
        self.experiments = None
        self.cost = lambda theta, a: -float(
            theta[0] * self.grid[a] ** 2 + theta[1] * self.grid[a] + theta[2])

    @property
    def n_experiments(self) -> int:
        return len(self.grid)

    def outcome_support(self, experiment):
        return None

    def expected_costs(self, belief, action_indices, *, n_samples=256, rng=None):
        if isinstance(belief, NigLinearBelief):
            return -belief.posterior_mean_rewards(self.grid)[list(action_indices)]
        return super().expected_costs(belief, action_indices,
                                      n_samples=n_samples, rng=rng)

    def expected_min_cost(self, belief, action_indices, *, n_samples=256, rng=None):
        if rng is None:
            rng = core.substream(0)
        draws = belief.sample_thetas(n_samples, rng)
        rewards = draws[:, :3] @ self.basis[list(action_indices)].T
        return float(np.mean(-rewards.max(axis=1)))

    def sample_predictive(self, belief, experiment, n, rng):
        return belief.predictive(self.grid[experiment]).sample(n, rng)

    def posterior(self, belief, experiment, outcome, min_ess=None):
        return belief.updated(self.grid[experiment], float(outcome))

    def conditional_ibr_costs(self, belief, experiment, outcomes, action_indices):
        """Vectorized posterior-IBR costs: the updated posterior mean is
        affine in the observed outcome, so all outcomes share one solve."""
        if not isinstance(belief, NigLinearBelief) or not belief.proper:
            return None
        x = belief.design_matrix
        y = np.array(belief.ys)
        phi = quadratic_basis(float(self.grid[experiment]))
        m = x.T @ x + np.outer(phi, phi)
        base = np.linalg.solve(m, x.T @ y)
        gain = np.linalg.solve(m, phi)
        sub = self.basis[list(action_indices)]
        vals = sub @ base
        slopes = sub @ gain
        table = vals[:, None] + slopes[:, None] * np.asarray(outcomes)[None, :]
        return -table.max(axis=0)


@dataclass(frozen=True)
class IterationRow:
    iteration: int
    experiment: int | None
    outcome: float | None
    best_action: int
    opportunity_cost: float


@dataclass
class EpisodeRecord:
    """One policy's trace through one simulated run."""

    run_id: int
    policy: str
    rows: list[IterationRow] = field(default_factory=list)
    wall_time: float = 0.0
    config_key: str = ""
    failure: str | None = None


_POLICY_TAG = {"mocu": 1, "kg": 2}


def _noise(config: SimConfig, policy: str, run: int, iteration: int,
           action: int) -> float:
    key = (config.master_seed, _STREAM_NOISE, run, iteration, action)
    if not config.shared_noise:
        key = key + (_POLICY_TAG[policy],)
    return float(core.substream(*key).standard_normal())


def _observe(config: SimConfig, model: TrueModel, policy: str, run: int,
             iteration: int, action: int) -> float:
    return model.rewards[action] + model.theta4 * _noise(
        config, policy, run, iteration, action)


def _initial_actions(config: SimConfig, run: int) -> tuple[int, ...]:
    rng = core.substream(config.master_seed, _STREAM_INIT, run)
    picks = rng.choice(len(config.grid), size=config.initial_actions,
                       replace=False)
    return tuple(int(a) for a in picks)


def _opportunity_cost(model: TrueModel, action: int) -> float:
    return model.best_reward - model.rewards[action]


def run_episode(policy: str, model: TrueModel, config: SimConfig, run_id: int,
                init_actions: tuple[int, ...] | None = None) -> EpisodeRecord:
    """Run one policy on one ground truth; iteration 0 is the pre-design state."""
    if policy not in ("mocu", "kg"):
        raise ValueError(f"unknown policy {policy!r}")
    if init_actions is None:
        init_actions = _initial_actions(config, run_id)
    record = EpisodeRecord(run_id=run_id, policy=policy,
                           config_key=config.config_key)
    started = time.perf_counter()
    try:
        if policy == "mocu":
            _run_mocu(record, model, config, run_id, init_actions)
        else:
            _run_kg(record, model, config, run_id, init_actions)
    except Exception as exc:  # recorded, excluded from aggregation
        record.failure = f"{type(exc).__name__}: {exc}"
    record.wall_time = time.perf_counter() - started
    return record


def _append(record: EpisodeRecord, model: TrueModel, iteration: int,
            experiment: int | None, outcome: float | None, best: int):
    record.rows.append(IterationRow(
        iteration=iteration, experiment=experiment, outcome=outcome,
        best_action=best, opportunity_cost=_opportunity_cost(model, best)))


def _run_mocu(record, model, config, run_id, init_actions):
    problem = QuadraticRewardProblem(config.grid)
    belief = NigLinearBelief()
    for a in init_actions:
        belief = belief.updated(config.grid[a],
                                _observe(config, model, "mocu", run_id, 0, a))
    loop_cfg = core.DesignLoopConfig(
        budget=config.iterations, stop_threshold=0.0,
        mc_theta_samples=config.n_theta_samples,
        mc_outcome_samples=config.n_outcome_samples,
        rng_seed=config.master_seed)

    best = int(np.argmax(belief.posterior_mean_rewards(config.grid)))
    _append(record, model, 0, None, None, best)

    for it in range(1, config.iterations + 1):
        sel = core.select_experiment(
            belief, problem, config=loop_cfg,
            seed_key=(config.master_seed, _STREAM_DESIGN, run_id, it))
        y = _observe(config, model, "mocu", run_id, it, sel.experiment)
        belief = belief.updated(config.grid[sel.experiment], y)
        best = int(np.argmax(belief.posterior_mean_rewards(config.grid)))
        _append(record, model, it, sel.experiment, y, best)


def _clip_psd(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.clip(vals, 0.0, None)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def _run_kg(record, model, config, run_id, init_actions):
    grid = np.asarray(config.grid)
    xs = [float(grid[a]) for a in init_actions]
    ys = [_observe(config, model, "kg", run_id, 0, a) for a in init_actions]

    def refit(iteration):
        return fit_gpr(np.array(xs), np.array(ys), restarts=config.gpr_restarts,
                       seed=(config.master_seed, _STREAM_GPR, run_id, iteration))

    gp = refit(0)
    mean, cov = gpr_posterior(gp, grid)
    _append(record, model, 0, None, None, int(np.argmax(mean)))

    for it in range(1, config.iterations + 1):
        belief = CorrelatedGaussianBelief(
            mean, _clip_psd(cov),
            np.full(len(grid), gp.noise_variance))
        a = kg_policy(belief)
        y = _observe(config, model, "kg", run_id, it, a)
        xs.append(float(grid[a]))
        ys.append(y)
        gp = refit(it)
        mean, cov = gpr_posterior(gp, grid)
        _append(record, model, it, a, y, int(np.argmax(mean)))


def _run_one(config: SimConfig, run_id: int) -> list[EpisodeRecord]:
    model = sample_true_model(
        core.substream(config.master_seed, _STREAM_MODEL, run_id), config.grid)
    init = _initial_actions(config, run_id)
    return [run_episode(p, model, config, run_id, init) for p in config.policies]


def run_benchmark(config: SimConfig) -> list[EpisodeRecord]:
    """All runs for all configured policies, paired per run.

    Runs are independent given their derived seeds, so they may execute in
    parallel; results merge deterministically by (run, policy).
    """
    if config.parallelism > 1:
        with ProcessPoolExecutor(max_workers=config.parallelism) as pool:
            chunks = list(pool.map(_run_one, [config] * config.runs,
                                   range(config.runs)))
    else:
        chunks = [_run_one(config, r) for r in range(config.runs)]
    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=lambda r: (r.run_id, config.policies.index(r.policy)))
    return records


def failed_runs(records: list[EpisodeRecord]) -> set[int]:
    return {r.run_id for r in records if r.failure is not None}


def aggregate(records: list[EpisodeRecord]) -> list[dict]:
    """Mean opportunity cost and standard error per (policy, iteration).

    Failed episodes are excluded; mixing records from different
    configurations is an error.
    """
    ok = [r for r in records if r.failure is None]
    if not ok:
        raise ValueError("no successful records to aggregate")
    keys = {r.config_key for r in ok}
    if len(keys) > 1:
        raise ValueError("records come from different configurations")
    table: dict[tuple[str, int], list[float]] = {}
    policies: list[str] = []
    for r in ok:
        if r.policy not in policies:
            policies.append(r.policy)
        for row in r.rows:
            table.setdefault((r.policy, row.iteration), []).append(
                row.opportunity_cost)
    out = []
    for policy in policies:
        iters = sorted(i for (p, i) in table if p == policy)
        for it in iters:
            vals = np.array(table[(policy, it)])
            stderr = (float(vals.std(ddof=1) / np.sqrt(len(vals)))
                      if len(vals) > 1 else 0.0)
            out.append({"policy": policy, "iteration": it,
                        "mean_oc": float(vals.mean()), "stderr": stderr,
                        "n_runs": len(vals)})
    return out


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def _atomic_write(path, write_fn):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_raw_csv(records: list[EpisodeRecord], path) -> None:
    def write(fh):
        w = csv.writer(fh)
        w.writerow(RAW_HEADER)
        for r in records:
            if r.failure is not None:
                continue
            for row in r.rows:
                w.writerow([r.run_id, r.policy, row.iteration,
                            _fmt(row.experiment), _fmt(row.outcome),
                            row.best_action, _fmt(row.opportunity_cost)])
    _atomic_write(path, write)


def write_aggregate_csv(agg: list[dict], path) -> None:
    def write(fh):
        w = csv.writer(fh)
        w.writerow(AGG_HEADER)
        for row in agg:
            w.writerow([row["policy"], row["iteration"], _fmt(row["mean_oc"]),
                        _fmt(row["stderr"]), row["n_runs"]])
    _atomic_write(path, write)


def plot_aggregate(agg: list[dict], path) -> None:
    """Static mean-opportunity-cost-vs-iteration plot (vector output)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for policy in sorted({row["policy"] for row in agg}):
        rows = sorted((r for r in agg if r["policy"] == policy),
                      key=lambda r: r["iteration"])
        its = [r["iteration"] for r in rows]
        means = [r["mean_oc"] for r in rows]
        errs = [r["stderr"] for r in rows]
        ax.errorbar(its, means, yerr=errs, marker="o", capsize=3, label=policy)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean opportunity cost")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
