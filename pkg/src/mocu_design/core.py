"""Generic engine for uncertainty-aware sequential experiment selection.

The engine works on three ingredients: a belief over uncertainty parameters
theta, a finite action set with a cost function C(theta, action), and a
finite experiment set whose outcomes are jointly distributed with theta.
From these it computes

* the IBR (intrinsically Bayesian robust) action: argmin of expected cost,
* MOCU: the expected excess cost of committing to the IBR action instead of
  each theta's own optimal action,
* the design value of an experiment: expected remaining MOCU under the
  prior-predictive outcome distribution,

and runs the greedy sequential loop "select experiment -> observe ->
update belief" until a budget or an improvement threshold is hit.

Two evaluation backends are provided.  Beliefs represented as weighted
atoms (:class:`DiscreteBelief`) with finite outcome supports are evaluated
by exact enumeration.  Everything else falls back to seeded Monte Carlo
with one substream per (step, experiment) so that candidate comparisons
are reproducible and share no draws.  Problem classes can additionally
supply closed forms through the hook methods on :class:`DesignProblem`;
see :mod:`mocu_design.policies` for the Gaussian ranking-and-selection
specialization.

Theta points are plain 1-D float arrays throughout; their interpretation
(Boolean bits, parameter vectors, ...) belongs to the problem definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ActionSet",
    "ContinuousOutcome",
    "DegenerateBeliefError",
    "DesignLoopConfig",
    "DesignLoopRecord",
    "DesignProblem",
    "DiscreteBelief",
    "ExperimentSet",
    "FiniteOutcome",
    "ImpossibleOutcomeError",
    "NonFiniteCostError",
    "SelectionResult",
    "StepRecord",
    "design_value",
    "expected_cost",
    "ibr_action",
    "mocu",
    "remaining_mocu",
    "run_design_loop",
    "select_experiment",
    "substream",
]

# Reserved tags for derived RNG substreams (kept distinct so that no two
# logical streams ever share a seed key).
STREAM_DESIGN = 101
STREAM_MOCU = 102
STREAM_LOOP = 103


class ImpossibleOutcomeError(ValueError):
    """An observed outcome has zero probability under every belief atom."""


class DegenerateBeliefError(ValueError):
    """Importance reweighting left too little effective support."""


class NonFiniteCostError(ValueError):
    """The cost oracle returned NaN or infinity."""


def substream(*key: int) -> np.random.Generator:
    """Deterministic generator for a tuple of integer seed components."""
    return np.random.default_rng(key)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


class ActionSet:
    """Finite, ordered action set with stable indices 0..A-1."""

    def __init__(self, labels: Sequence[str] | int):
        if isinstance(labels, int):
            labels = tuple(str(i) for i in range(labels))
        self.labels = tuple(str(s) for s in labels)
        if not self.labels:
            raise ValueError("action set must be nonempty")

    def __len__(self) -> int:
        return len(self.labels)

    def __repr__(self) -> str:
        return f"ActionSet({list(self.labels)!r})"


@dataclass(frozen=True)
class FiniteOutcome:
    """Outcome model with a finite support.

    ``probabilities(theta)`` returns the distribution of the outcome over
    ``support`` for one theta point; it must sum to 1 for every theta.
    """

    support: tuple
    probabilities: Callable[[np.ndarray], np.ndarray]

    def probs(self, theta: np.ndarray) -> np.ndarray:
        p = np.asarray(self.probabilities(theta), dtype=float)
        if p.shape != (len(self.support),):
            raise ValueError(
                f"outcome distribution has shape {p.shape}, expected ({len(self.support)},)"
            )
        if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"outcome probabilities invalid for theta={theta}: {p}")
        return p


@dataclass(frozen=True)
class ContinuousOutcome:
    """Outcome model with a continuous (or unbounded) support.

    ``sample(theta, rng, size)`` draws outcomes given theta; ``logpdf(x,
    theta)`` evaluates the conditional log-density used for posterior
    reweighting.
    """

    sample: Callable[[np.ndarray, np.random.Generator, int], np.ndarray]
    logpdf: Callable[[float, np.ndarray], float]


class ExperimentSet:
    """Indexed experiments, each carrying its outcome model."""

    def __init__(self, models: Sequence[FiniteOutcome | ContinuousOutcome],
                 labels: Sequence[str] | None = None):
        self.models = tuple(models)
        if not self.models:
            raise ValueError("experiment set must be nonempty")
        if labels is None:
            labels = tuple(str(i) for i in range(len(self.models)))
        self.labels = tuple(str(s) for s in labels)
        if len(self.labels) != len(self.models):
            raise ValueError("labels and models must have equal length")

    def __len__(self) -> int:
        return len(self.models)


class DiscreteBelief:
    """Weighted atoms over theta points.

    Weights must be nonnegative and sum to one within 1e-12; theta vectors
    must be finite and share a common dimension.  Instances are immutable:
    updates return new beliefs.
    """

    def __init__(self, thetas: Iterable, weights: Iterable[float]):
        t = np.atleast_2d(np.asarray(list(thetas), dtype=float))
        w = np.asarray(list(weights), dtype=float)
        if t.shape[0] == 0:
            raise ValueError("belief must contain at least one atom")
        if t.shape[0] != w.shape[0]:
            raise ValueError("thetas and weights must have equal length")
        if not np.all(np.isfinite(t)):
            raise ValueError("theta points must be finite")
        if np.any(w < 0) or not np.isfinite(w).all():
            raise ValueError("weights must be nonnegative and finite")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1 within 1e-12")
        t.flags.writeable = False
        w.flags.writeable = False
        self.thetas = t
        self.weights = w

    def __len__(self) -> int:
        return self.thetas.shape[0]

    @property
    def dimension(self) -> int:
        return self.thetas.shape[1]

    @property
    def effective_sample_size(self) -> float:
        return 1.0 / float(np.sum(self.weights**2))

    def reweighted(self, likelihoods: np.ndarray,
                   min_ess: float | None = None) -> "DiscreteBelief":
        """Posterior after multiplying weights by per-atom likelihoods."""
        like = np.asarray(likelihoods, dtype=float)
        if like.shape != self.weights.shape:
            raise ValueError("one likelihood value per atom is required")
        raw = self.weights * like
        norm = raw.sum()
        if norm <= 0.0:
            raise ImpossibleOutcomeError(
                "outcome has zero probability under every belief atom"
            )
        post = DiscreteBelief(self.thetas, raw / norm)
        if min_ess is not None and post.effective_sample_size < min_ess:
            raise DegenerateBeliefError(
                f"effective sample size {post.effective_sample_size:.3f} < {min_ess}"
            )
        return post

    def sample_thetas(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self), size=n, p=self.weights)
        return self.thetas[idx]

    def __repr__(self) -> str:
        return f"DiscreteBelief({len(self)} atoms, dim {self.dimension})"


@dataclass(frozen=True)
class DesignLoopConfig:
    """Knobs for sequential selection: budget, stop rule, MC sample sizes."""

    budget: int = 10
    stop_threshold: float = 1e-6
    mc_theta_samples: int = 256
    mc_outcome_samples: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if self.stop_threshold < 0:
            raise ValueError("stop threshold must be nonnegative")
        if self.mc_theta_samples < 1 or self.mc_outcome_samples < 1:
            raise ValueError("Monte Carlo sample counts must be at least 1")


# ---------------------------------------------------------------------------
# Design problems
# ---------------------------------------------------------------------------


class DesignProblem:
    """Bundle of actions, experiments and cost, plus engine hooks.

    The base class implements every hook for :class:`DiscreteBelief`
    beliefs by enumeration over atoms.  Specialized problems (conjugate
    Gaussian families, factorized particle beliefs) subclass and override
    whichever hooks they can serve in closed or vectorized form; the
    module-level functions only ever talk to these hooks.
    """

    def __init__(self, actions: ActionSet, experiments: ExperimentSet,
                 cost: Callable[[np.ndarray, int], float]):
        self.actions = actions
        self.experiments = experiments
        self.cost = cost

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_experiments(self) -> int:
        return len(self.experiments)

    # -- cost expectations --------------------------------------------------

    def cost_matrix(self, belief: DiscreteBelief,
                    action_indices: Sequence[int]) -> np.ndarray:
        """Per-atom, per-action cost table with finiteness checking."""
        out = np.empty((len(belief), len(action_indices)))
        for k in range(len(belief)):
            theta = belief.thetas[k]
            for col, a in enumerate(action_indices):
                c = float(self.cost(theta, a))
                if not math.isfinite(c):
                    raise NonFiniteCostError(
                        f"cost is {c!r} at theta={theta.tolist()}, action={a}"
                    )
                out[k, col] = c
        return out

    def expected_costs(self, belief, action_indices: Sequence[int],
                       *, n_samples: int = 256,
                       rng: np.random.Generator | None = None) -> np.ndarray:
        """E_theta[C(theta, a)] for each action index, exact when possible."""
        if isinstance(belief, DiscreteBelief):
            return belief.weights @ self.cost_matrix(belief, action_indices)
        if rng is None:
            rng = substream(0)
        draws = belief.sample_thetas(n_samples, rng)
        sampled = DiscreteBelief(draws, np.full(len(draws), 1.0 / len(draws)))
        return sampled.weights @ self.cost_matrix(sampled, action_indices)

    def expected_min_cost(self, belief, action_indices: Sequence[int],
                          *, n_samples: int = 256,
                          rng: np.random.Generator | None = None) -> float:
        """E_theta[min_a C(theta, a)], the baseline every MOCU subtracts."""
        if isinstance(belief, DiscreteBelief):
            m = self.cost_matrix(belief, action_indices)
            return float(belief.weights @ m.min(axis=1))
        if rng is None:
            rng = substream(0)
        draws = belief.sample_thetas(n_samples, rng)
        sampled = DiscreteBelief(draws, np.full(len(draws), 1.0 / len(draws)))
        m = self.cost_matrix(sampled, action_indices)
        return float(sampled.weights @ m.min(axis=1))

    # -- outcome handling ---------------------------------------------------

    def outcome_support(self, experiment: int):
        """Finite outcome values for an experiment, or None if continuous."""
        model = self.experiments.models[experiment]
        return model.support if isinstance(model, FiniteOutcome) else None

    def outcome_probability_table(self, belief: DiscreteBelief,
                                  experiment: int) -> np.ndarray:
        """(n_atoms, n_outcomes) table of P(outcome | theta_k)."""
        model = self.experiments.models[experiment]
        if not isinstance(model, FiniteOutcome):
            raise TypeError("experiment does not have a finite outcome support")
        return np.stack([model.probs(belief.thetas[k]) for k in range(len(belief))])

    def likelihoods(self, belief: DiscreteBelief, experiment: int,
                    outcome) -> np.ndarray:
        """Per-atom likelihood of one outcome."""
        model = self.experiments.models[experiment]
        if isinstance(model, FiniteOutcome):
            try:
                j = model.support.index(outcome)
            except ValueError:
                raise ImpossibleOutcomeError(
                    f"outcome {outcome!r} not in support of experiment {experiment}"
                ) from None
            return self.outcome_probability_table(belief, experiment)[:, j]
        return np.exp([model.logpdf(outcome, belief.thetas[k])
                       for k in range(len(belief))])

    def posterior(self, belief, experiment: int, outcome,
                  min_ess: float | None = None):
        """Belief updated on one observed outcome (does not mutate input)."""
        return belief.reweighted(self.likelihoods(belief, experiment, outcome),
                                 min_ess=min_ess)

    def sample_predictive(self, belief, experiment: int, n: int,
                          rng: np.random.Generator) -> np.ndarray:
        """Draws from the prior-predictive outcome distribution."""
        model = self.experiments.models[experiment]
        thetas = belief.sample_thetas(n, rng)
        if isinstance(model, FiniteOutcome):
            support = np.asarray(model.support)
            return np.array([
                support[rng.choice(len(support), p=model.probs(t))] for t in thetas
            ])
        return np.array([model.sample(t, rng, 1)[0] for t in thetas])

    def predictive_quadrature(self, belief, experiment: int):
        """Optional deterministic (outcomes, weights) pair; None if unsupported."""
        return None

    # -- optional closed forms ----------------------------------------------

    def exact_conditional_ibr_cost(self, belief, experiment: int,
                                   action_indices: Sequence[int]) -> float | None:
        """E_xi[E_theta|xi[C(theta, psi_IBR(posterior))]] in closed form.

        Returns None when no closed form is available; the engine then
        enumerates or samples.
        """
        return None

    def conditional_ibr_costs(self, belief, experiment: int,
                              outcomes: np.ndarray,
                              action_indices: Sequence[int]) -> np.ndarray | None:
        """Vectorized per-outcome min_a E_theta|xi[C]; None -> generic loop."""
        return None


# ---------------------------------------------------------------------------
# Core quantities
# ---------------------------------------------------------------------------


def _as_indices(subset, total: int) -> tuple[int, ...]:
    if subset is None:
        return tuple(range(total))
    idx = tuple(int(i) for i in subset)
    if not idx:
        raise ValueError("index subset must be nonempty")
    if any(i < 0 or i >= total for i in idx):
        raise IndexError(f"index out of range in {idx}")
    return idx


def expected_cost(belief, cost: Callable[[np.ndarray, int], float], action: int,
                  *, n_samples: int = 256,
                  rng: np.random.Generator | None = None) -> float:
    """E_theta[C(theta, action)]: exact sum over atoms, or a Monte Carlo mean."""
    if isinstance(belief, DiscreteBelief):
        total = 0.0
        for k in range(len(belief)):
            c = float(cost(belief.thetas[k], action))
            if not math.isfinite(c):
                raise NonFiniteCostError(
                    f"cost is {c!r} at theta={belief.thetas[k].tolist()}, action={action}"
                )
            total += belief.weights[k] * c
        return total
    if rng is None:
        rng = substream(0)
    draws = belief.sample_thetas(n_samples, rng)
    vals = np.array([cost(t, action) for t in draws], dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise NonFiniteCostError(
            f"cost is non-finite at theta={draws[bad].tolist()}, action={action}"
        )
    return float(vals.mean())


def ibr_action(belief, actions, cost: Callable[[np.ndarray, int], float],
               **mc_kwargs) -> int:
    """Intrinsically Bayesian robust action: argmin expected cost, lowest index on ties."""
    n = len(actions) if not isinstance(actions, int) else actions
    vals = [expected_cost(belief, cost, a, **mc_kwargs) for a in range(n)]
    return int(np.argmin(vals))


def mocu(belief, actions, cost: Callable[[np.ndarray, int], float],
         **mc_kwargs) -> float:
    """Mean objective cost of uncertainty: E[C(theta, IBR)] - E[min_a C(theta, a)].

    Exact for discrete beliefs (nonnegative up to 1e-10); a Monte Carlo
    estimate otherwise.
    """
    n = len(actions) if not isinstance(actions, int) else actions
    problem = _BareProblem(n, cost)
    idx = tuple(range(n))
    costs = problem.expected_costs(belief, idx, **_mc_only(mc_kwargs))
    return float(costs.min()) - problem.expected_min_cost(belief, idx,
                                                          **_mc_only(mc_kwargs))


def _mc_only(kwargs: dict) -> dict:
    return {k: v for k, v in kwargs.items() if k in ("n_samples", "rng")}


class _BareProblem(DesignProblem):
    """Actions-and-cost-only problem for belief-level quantities."""

    def __init__(self, n_actions: int, cost):
        self.actions = ActionSet(n_actions)
        self.experiments = None
        self.cost = cost


def remaining_mocu(belief, problem: DesignProblem, experiment: int, outcome,
                   *, actions: Sequence[int] | None = None,
                   n_samples: int = 256,
                   rng: np.random.Generator | None = None) -> float:
    """MOCU of the outcome-updated belief; the input belief is untouched."""
    idx = _as_indices(actions, problem.n_actions)
    post = problem.posterior(belief, experiment, outcome)
    costs = problem.expected_costs(post, idx, n_samples=n_samples, rng=rng)
    return float(costs.min()) - problem.expected_min_cost(
        post, idx, n_samples=n_samples, rng=rng)


def _exact_outcome_scan(belief: DiscreteBelief, problem: DesignProblem,
                        experiment: int, idx: tuple[int, ...]):
    """Per-outcome posteriors and marginal probabilities for finite supports."""
    table = problem.outcome_probability_table(belief, experiment)
    marginals = belief.weights @ table
    posteriors = []
    for j in range(table.shape[1]):
        if marginals[j] <= 0.0:
            posteriors.append(None)
            continue
        posteriors.append(belief.reweighted(table[:, j]))
    return marginals, posteriors


def _score_conditional_ibr(belief, problem: DesignProblem, experiment: int,
                           idx: tuple[int, ...], config: DesignLoopConfig,
                           seed_key: tuple[int, ...]) -> float:
    """E_xi[min_a E_theta|xi[C(theta, a)]]: the experiment's selection score."""
    closed = problem.exact_conditional_ibr_cost(belief, experiment, idx)
    if closed is not None:
        return float(closed)

    if (isinstance(belief, DiscreteBelief)
            and problem.outcome_support(experiment) is not None):
        marginals, posteriors = _exact_outcome_scan(belief, problem, experiment, idx)
        score = 0.0
        for p, post in zip(marginals, posteriors):
            if post is None:
                continue
            score += p * float(problem.expected_costs(post, idx).min())
        return score

    quad = problem.predictive_quadrature(belief, experiment)
    if quad is not None:
        outcomes, weights = quad
    else:
        rng = substream(*seed_key, STREAM_DESIGN, experiment)
        outcomes = problem.sample_predictive(belief, experiment,
                                             config.mc_outcome_samples, rng)
        weights = np.full(len(outcomes), 1.0 / len(outcomes))

    vec = problem.conditional_ibr_costs(belief, experiment,
                                        np.asarray(outcomes), idx)
    if vec is not None:
        return float(np.asarray(weights) @ np.asarray(vec))

    inner_rng = substream(*seed_key, STREAM_DESIGN, experiment, 1)
    score = 0.0
    for o, w in zip(outcomes, weights):
        post = problem.posterior(belief, experiment, o, min_ess=2.0)
        score += w * float(problem.expected_costs(
            post, idx, n_samples=config.mc_theta_samples,
            rng=inner_rng).min())
    return float(score)


def design_value(belief, problem: DesignProblem, experiment: int,
                 *, config: DesignLoopConfig | None = None,
                 seed_key: tuple[int, ...] = (0,),
                 actions: Sequence[int] | None = None) -> float:
    """Expected remaining MOCU of one experiment under the prior predictive.

    For finite supports and discrete beliefs this is the exact
    outcome-weighted average of posterior MOCUs and satisfies
    ``design_value <= mocu + 1e-10``; otherwise it is estimated from the
    experiment's seeded substream.
    """
    config = config or DesignLoopConfig()
    idx = _as_indices(actions, problem.n_actions)

    if (isinstance(belief, DiscreteBelief)
            and problem.outcome_support(experiment) is not None
            and problem.exact_conditional_ibr_cost(belief, experiment, idx) is None):
        marginals, posteriors = _exact_outcome_scan(belief, problem, experiment, idx)
        value = 0.0
        for p, post in zip(marginals, posteriors):
            if post is None:
                continue
            costs = problem.expected_costs(post, idx)
            value += p * (float(costs.min())
                          - problem.expected_min_cost(post, idx))
        return value

    score = _score_conditional_ibr(belief, problem, experiment, idx,
                                   config, seed_key)
    baseline = problem.expected_min_cost(
        belief, idx, n_samples=config.mc_theta_samples,
        rng=substream(*seed_key, STREAM_MOCU))
    return score - baseline


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of one experiment-selection step.

    ``design_values`` aligns with ``experiment_indices``; ``mocu_reduction``
    is ``design_value(chosen) - mocu`` and is nonpositive up to tolerance
    under exact backends.
    """

    experiment: int
    design_value: float
    mocu_reduction: float
    mocu: float
    experiment_indices: tuple[int, ...]
    design_values: tuple[float, ...]

    @property
    def reductions(self) -> tuple[float, ...]:
        return tuple(v - self.mocu for v in self.design_values)


def select_experiment(belief, problem: DesignProblem,
                      *, config: DesignLoopConfig | None = None,
                      seed_key: tuple[int, ...] = (0,),
                      actions: Sequence[int] | None = None,
                      experiments: Sequence[int] | None = None) -> SelectionResult:
    """Pick the experiment minimizing expected remaining MOCU.

    Ties resolve to the lowest experiment index.  ``actions`` and
    ``experiments`` restrict the candidate sets (the loop uses this for
    time-varying spaces).  All Monte Carlo evaluation derives from
    ``seed_key`` with a per-experiment substream, so repeated calls are
    deterministic and candidates share no draws.
    """
    config = config or DesignLoopConfig()
    a_idx = _as_indices(actions, problem.n_actions)
    e_idx = _as_indices(experiments, problem.n_experiments)

    scores = np.array([
        _score_conditional_ibr(belief, problem, e, a_idx, config, seed_key)
        for e in e_idx
    ])
    ibr_cost = float(problem.expected_costs(
        belief, a_idx, n_samples=config.mc_theta_samples,
        rng=substream(*seed_key, STREAM_MOCU, 1)).min())
    baseline = problem.expected_min_cost(
        belief, a_idx, n_samples=config.mc_theta_samples,
        rng=substream(*seed_key, STREAM_MOCU))

    mocu_value = ibr_cost - baseline
    reductions = scores - ibr_cost
    values = mocu_value + reductions

    pick = int(np.argmin(scores))
    return SelectionResult(
        experiment=e_idx[pick],
        design_value=float(values[pick]),
        mocu_reduction=float(reductions[pick]),
        mocu=mocu_value,
        experiment_indices=e_idx,
        design_values=tuple(float(v) for v in values),
    )


# ---------------------------------------------------------------------------
# Sequential loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    step: int
    experiment: int
    outcome: object
    best_action: int
    mocu: float
    mocu_reduction: float


@dataclass
class DesignLoopRecord:
    """Trace of one sequential design run."""

    initial_best_action: int
    initial_mocu: float
    steps: list[StepRecord] = field(default_factory=list)
    stopped_by_threshold: bool = False

    @property
    def n_experiments_run(self) -> int:
        return len(self.steps)

    @property
    def final_best_action(self) -> int:
        return self.steps[-1].best_action if self.steps else self.initial_best_action


def run_design_loop(problem: DesignProblem, belief, config: DesignLoopConfig,
                    environment: Callable[[int], object],
                    restrict: Callable[[int, object], tuple] | None = None,
                    ) -> DesignLoopRecord:
    """Greedy sequential design against an outcome source.

    ``environment(experiment_index)`` must return the observed outcome,
    simulated from a hidden truth or replayed.  ``restrict(step, belief)``
    may narrow the (action, experiment) index sets per step; return
    ``(None, None)`` entries to keep a set unrestricted.  The loop stops
    when the budget is exhausted or the best candidate's |MOCU reduction|
    falls below ``config.stop_threshold``.
    """

    def current_sets(step, current_belief):
        if restrict is None:
            return None, None
        return restrict(step, current_belief)

    a0, _ = current_sets(0, belief)
    idx0 = _as_indices(a0, problem.n_actions)
    costs0 = problem.expected_costs(
        belief, idx0, n_samples=config.mc_theta_samples,
        rng=substream(config.rng_seed, STREAM_LOOP, 0))
    record = DesignLoopRecord(
        initial_best_action=idx0[int(np.argmin(costs0))],
        initial_mocu=float(costs0.min()) - problem.expected_min_cost(
            belief, idx0, n_samples=config.mc_theta_samples,
            rng=substream(config.rng_seed, STREAM_LOOP, 1)),
    )

    for step in range(config.budget):
        a_sub, e_sub = current_sets(step, belief)
        sel = select_experiment(belief, problem, config=config,
                                seed_key=(config.rng_seed, step),
                                actions=a_sub, experiments=e_sub)
        if abs(sel.mocu_reduction) < config.stop_threshold:
            record.stopped_by_threshold = True
            break
        try:
            outcome = environment(sel.experiment)
        except Exception as exc:
            raise RuntimeError(
                f"environment failed at step {step} "
                f"(experiment {sel.experiment})") from exc
        belief = problem.posterior(belief, sel.experiment, outcome)

        a_next, _ = current_sets(step + 1, belief)
        idx = _as_indices(a_next, problem.n_actions)
        costs = problem.expected_costs(
            belief, idx, n_samples=config.mc_theta_samples,
            rng=substream(config.rng_seed, STREAM_LOOP, 2 * step + 2))
        mocu_now = float(costs.min()) - problem.expected_min_cost(
            belief, idx, n_samples=config.mc_theta_samples,
            rng=substream(config.rng_seed, STREAM_LOOP, 2 * step + 3))
        record.steps.append(StepRecord(
            step=step,
            experiment=sel.experiment,
            outcome=outcome,
            best_action=idx[int(np.argmin(costs))],
            mocu=mocu_now,
            mocu_reduction=sel.mocu_reduction,
        ))
    return record
