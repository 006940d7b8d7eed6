"""Knowledge-gradient and expected-improvement policies.

Both policies are one-step look-aheads for ranking and selection under
Gaussian beliefs, and both are specializations of the generic engine in
:mod:`mocu_design.core` with reward-maximization cost ``C(theta, a) =
-theta[a]``:

* KG scores experiment i by how much observing action i is expected to
  raise the maximal posterior mean.  Posterior means after one observation
  are affine in the standardized outcome, so the score reduces to an exact
  expectation of a max of lines, computed by :func:`expected_max_affine`.
* EGO (expected improvement) is the noise-free case in which the final
  pick is confined to already-observed actions; the look-ahead collapses
  to the classic closed form over the best observed reward.

:class:`GaussianRankingProblem` plugs the same closed forms into the
generic engine, so policy/engine agreement is exact rather than
statistical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import core
from .beliefs import CorrelatedGaussianBelief, IndependentGaussianBelief

__all__ = [
    "ExhaustedActionsError",
    "GaussianRankingProblem",
    "LinePencil",
    "ObservedSet",
    "ego_policy",
    "ei_value",
    "expected_max_affine",
    "kg_policy",
    "kg_value",
    "ranking_problem",
]

_SLOPE_TOL = 1e-12
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ExhaustedActionsError(RuntimeError):
    """Every action's reward has already been observed."""


def _phi(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


@dataclass(frozen=True)
class LinePencil:
    """A family of lines ``a_j + b_j * z`` evaluated against a standard normal."""

    intercepts: np.ndarray
    slopes: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.intercepts, dtype=float)
        b = np.asarray(self.slopes, dtype=float)
        if a.shape != b.shape or a.ndim != 1 or a.size == 0:
            raise ValueError("intercepts and slopes must be equal-length nonempty vectors")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValueError("line parameters must be finite")
        object.__setattr__(self, "intercepts", a)
        object.__setattr__(self, "slopes", b)


def expected_max_affine(pencil: LinePencil) -> float:
    """Exact E[max_j (a_j + b_j Z)] for Z standard normal.

    Sorts lines by slope, removes lines that never attain the upper
    envelope (slope ties within 1e-12 keep the larger intercept), then
    integrates the piecewise-linear envelope against the normal density:
    with breakpoints c_0 = -inf < c_1 < ... < c_k = +inf the value is
    ``sum_j a_j (Phi(c_{j+1}) - Phi(c_j)) + b_j (phi(c_j) - phi(c_{j+1}))``.
    Equals max(a) whenever all slopes coincide.
    """
    order = np.lexsort((pencil.intercepts, pencil.slopes))
    a_all = pencil.intercepts[order]
    b_all = pencil.slopes[order]

    # collapse (near-)equal slopes: lexsort put the largest intercept last
    a, b = [], []
    for j in range(len(a_all)):
        if a and b_all[j] - b[-1] <= _SLOPE_TOL:
            if a_all[j] > a[-1]:
                a[-1], b[-1] = a_all[j], b_all[j]
        else:
            a.append(a_all[j])
            b.append(b_all[j])

    # upper-envelope sweep: kept[j] holds the line entering at breaks[j]
    kept: list[int] = []
    breaks: list[float] = []
    for j in range(len(a)):
        while kept:
            i = kept[-1]
            z = (a[i] - a[j]) / (b[j] - b[i])
            if breaks and z <= breaks[-1]:
                kept.pop()
                breaks.pop()
                continue
            kept.append(j)
            breaks.append(z)
            break
        else:
            kept.append(j)
    if len(kept) == 1:
        return float(a[kept[0]])

    edges = np.concatenate(([-np.inf], breaks, [np.inf]))
    cdf = ndtr(edges)
    pdf = np.where(np.isfinite(edges), _phi(edges), 0.0)
    total = 0.0
    for pos, j in enumerate(kept):
        total += a[j] * (cdf[pos + 1] - cdf[pos]) + b[j] * (pdf[pos] - pdf[pos + 1])
    return float(total)


# ---------------------------------------------------------------------------
# Knowledge gradient
# ---------------------------------------------------------------------------


def kg_value(belief: CorrelatedGaussianBelief, action: int) -> float:
    """Expected increase of the maximal posterior mean from measuring one action."""
    pencil = LinePencil(belief.mean, belief.standardized_update_slopes(action))
    return expected_max_affine(pencil) - float(belief.mean.max())


def kg_policy(belief: CorrelatedGaussianBelief) -> int:
    """Measure the action with the largest knowledge-gradient value."""
    values = [kg_value(belief, i) for i in range(len(belief))]
    return int(np.argmax(values))


# ---------------------------------------------------------------------------
# EGO / expected improvement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservedSet:
    """Actions whose rewards were observed exactly, with those rewards."""

    actions: tuple[int, ...]
    rewards: tuple[float, ...]

    def __post_init__(self):
        if len(self.actions) != len(self.rewards):
            raise ValueError("actions and rewards must have equal length")
        if len(set(self.actions)) != len(self.actions):
            raise ValueError("duplicate action in observed set")
        if any(not np.isfinite(r) for r in self.rewards):
            raise ValueError("rewards must be finite")

    def __len__(self) -> int:
        return len(self.actions)

    def __contains__(self, action: int) -> bool:
        return action in self.actions

    def with_observation(self, action: int, reward: float) -> "ObservedSet":
        return ObservedSet(self.actions + (int(action),),
                           self.rewards + (float(reward),))

    def best_action(self) -> int:
        """Restricted IBR action: the best already-observed reward (lowest index tie)."""
        if not self.actions:
            raise ValueError("observed set is empty")
        order = np.argsort(self.actions)
        acts = np.asarray(self.actions)[order]
        rews = np.asarray(self.rewards)[order]
        return int(acts[int(np.argmax(rews))])

    def best_reward(self) -> float:
        if not self.actions:
            raise ValueError("observed set is empty")
        return float(max(self.rewards))


def _posterior_moments(belief, action: int) -> tuple[float, float]:
    if isinstance(belief, CorrelatedGaussianBelief):
        return float(belief.mean[action]), float(belief.covariance[action, action])
    if isinstance(belief, IndependentGaussianBelief):
        return float(belief.means[action]), float(belief.variances[action])
    raise TypeError(f"unsupported belief type {type(belief).__name__}")


def ei_value(belief, candidate: int, observed: ObservedSet) -> float:
    """Expected improvement of one unobserved action over the best observed reward."""
    if candidate in observed:
        raise ValueError(f"action {candidate} was already observed")
    mu, var = _posterior_moments(belief, candidate)
    f_star = observed.best_reward()
    s = np.sqrt(max(var, 0.0))
    if s == 0.0:
        return max(mu - f_star, 0.0)
    z = (mu - f_star) / s
    return float((mu - f_star) * ndtr(z) + s * _phi(z))


def ego_policy(belief, observed: ObservedSet) -> int:
    """Measure the unobserved action with the largest expected improvement."""
    candidates = [i for i in range(_belief_size(belief)) if i not in observed]
    if not candidates:
        raise ExhaustedActionsError("all actions have been observed")
    values = [ei_value(belief, i, observed) for i in candidates]
    return candidates[int(np.argmax(values))]


def _belief_size(belief) -> int:
    return len(belief)


# ---------------------------------------------------------------------------
# Generic-engine adapter
# ---------------------------------------------------------------------------


class GaussianRankingProblem(core.DesignProblem):
    """Ranking and selection as a generic design problem.

    Experiment i applies action i and observes its reward plus
    ``N(0, noise[i])`` noise; the cost is the negated reward.  The
    conditional-IBR-cost hook routes through :func:`expected_max_affine`,
    which makes engine selections bit-identical to :func:`kg_policy` (and,
    with zero noise plus an action restriction to the observed set, to
    :func:`ego_policy`).
    """

    def __init__(self, n_actions: int, labels=None):
        self.actions = core.ActionSet(labels if labels is not None else n_actions)
        self.experiments = None  # outcome models live in the belief's conjugacy
        self.cost = lambda theta, a: -float(theta[a])

    @property
    def n_experiments(self) -> int:
        return len(self.actions)

    def outcome_support(self, experiment):
        return None

    def expected_costs(self, belief, action_indices, *, n_samples=256, rng=None):
        idx = list(action_indices)
        if isinstance(belief, CorrelatedGaussianBelief):
            return -belief.mean[idx]
        if isinstance(belief, IndependentGaussianBelief):
            return -belief.means[idx]
        return super().expected_costs(belief, action_indices,
                                      n_samples=n_samples, rng=rng)

    def expected_min_cost(self, belief, action_indices, *, n_samples=256, rng=None):
        # E[min_a -theta_a] = -E[max_a theta_a]: no closed form, Monte Carlo
        if rng is None:
            rng = core.substream(0)
        draws = belief.sample_thetas(n_samples, rng)
        return float(np.mean(-draws[:, list(action_indices)].max(axis=1)))

    def exact_conditional_ibr_cost(self, belief, experiment, action_indices):
        if not isinstance(belief, CorrelatedGaussianBelief):
            return None
        idx = sorted(set(int(i) for i in action_indices) | {int(experiment)})
        slopes = belief.standardized_update_slopes(experiment)
        pencil = LinePencil(belief.mean[idx], slopes[idx])
        return -expected_max_affine(pencil)

    def posterior(self, belief, experiment, outcome, min_ess=None):
        return belief.updated(experiment, outcome)

    def sample_predictive(self, belief, experiment, n, rng):
        mu, var = _posterior_moments(belief, experiment)
        lam = float(belief.noise_variances[experiment])
        return mu + np.sqrt(var + lam) * rng.standard_normal(n)


def ranking_problem(belief) -> GaussianRankingProblem:
    return GaussianRankingProblem(len(belief))
