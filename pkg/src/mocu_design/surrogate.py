"""Dopant/concentration selection against a surrogate dissipation-energy model.

Each of N dopants is characterized by two uncertain parameters (strength
h, disturbance range r) carried as a per-dopant particle belief; an
action applies dopant i at concentration o_j and costs the surrogate
prediction g(h_i, r_i, o_j).  An experiment measures that prediction with
Gaussian noise tau, updating only dopant i's particles.

Candidate evaluation reuses the generic engine: the problem class exposes
factorized posterior updates, a prior-predictive sampler, and (for small
fixtures) a deterministic Gauss-Hermite outcome quadrature with one or
more nodes per particle, so that design values can be checked against
exact tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial.hermite import hermgauss

from . import core

__all__ = [
    "FactorizedParticleBelief",
    "SurrogateProblem",
    "default_surrogate",
    "design_policy",
    "ibr_pair",
    "simulate_environment",
]


def default_surrogate(c1: float = 1.0, c2: float = 1.0, c3: float = 1.0,
                      c4: float = 0.1) -> Callable[[float, float, float], float]:
    """Smooth synthetic stand-in for the expensive physics simulator.

    ``g(h, r, o) = (h - c1*o)^2 + c2*(r - c3)^2 + c4*o``: a single bowl per
    concentration, so every fixture has a well-defined optimum.
    """

    def g(h: float, r: float, o: float) -> float:
        return (h - c1 * o) ** 2 + c2 * (r - c3) ** 2 + c4 * o

    return g


class FactorizedParticleBelief:
    """Product of independent per-dopant particle beliefs over (h, r)."""

    def __init__(self, dopants: tuple[core.DiscreteBelief, ...]):
        self.dopants = tuple(dopants)
        if not self.dopants:
            raise ValueError("at least one dopant belief is required")
        for d in self.dopants:
            if d.dimension != 2:
                raise ValueError("dopant particles must be (h, r) pairs")

    def __len__(self) -> int:
        return len(self.dopants)

    @property
    def effective_sample_size(self) -> float:
        """ESS of the product belief: the product of per-dopant ESS values."""
        out = 1.0
        for d in self.dopants:
            out *= d.effective_sample_size
        return out

    def with_dopant(self, i: int, updated: core.DiscreteBelief
                    ) -> "FactorizedParticleBelief":
        parts = list(self.dopants)
        parts[i] = updated
        return FactorizedParticleBelief(tuple(parts))

    def sample_thetas(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Joint draws, concatenating each dopant's (h, r) columns."""
        cols = [d.sample_thetas(n, rng) for d in self.dopants]
        return np.hstack(cols)


class SurrogateProblem(core.DesignProblem):
    """Design problem over the (dopant, concentration) grid.

    Candidate ``c`` maps to dopant ``c // P`` and concentration ``c % P``.
    Experiments and actions share the grid: measuring a candidate returns
    a noisy surrogate value for its dopant at its concentration.
    """

    def __init__(self, surrogate: Callable[[float, float, float], float],
                 n_dopants: int, concentrations, tau: float,
                 outcome_method: str = "mc", quadrature_nodes: int = 1):
        if tau <= 0:
            raise ValueError("measurement noise tau must be positive")
        if outcome_method not in ("mc", "quadrature"):
            raise ValueError(f"unknown outcome method {outcome_method!r}")
        self.surrogate = surrogate
        self.n_dopants = int(n_dopants)
        self.concentrations = tuple(float(o) for o in concentrations)
        self.tau = float(tau)
        self.outcome_method = outcome_method
        self.quadrature_nodes = int(quadrature_nodes)
        labels = [f"d{i}:o{j}" for i in range(self.n_dopants)
                  for j in range(len(self.concentrations))]
        self.actions = core.ActionSet(labels)
        self.experiments = None
        self.cost = self._cost

    @property
    def n_experiments(self) -> int:
        return len(self.actions)

    def outcome_support(self, experiment):
        return None

    def pair(self, candidate: int) -> tuple[int, int]:
        return divmod(int(candidate), len(self.concentrations))

    def _cost(self, theta: np.ndarray, candidate: int) -> float:
        i, j = self.pair(candidate)
        return self.surrogate(theta[2 * i], theta[2 * i + 1],
                              self.concentrations[j])

    def _predictions(self, belief: FactorizedParticleBelief, candidate: int
                     ) -> tuple[np.ndarray, np.ndarray]:
        """Surrogate values and weights of the measured dopant's particles."""
        i, j = self.pair(candidate)
        d = belief.dopants[i]
        o = self.concentrations[j]
        g = np.array([self.surrogate(h, r, o) for h, r in d.thetas])
        return g, d.weights

    # -- engine hooks ---------------------------------------------------------

    def expected_costs(self, belief, action_indices, *, n_samples=256, rng=None):
        out = np.empty(len(action_indices))
        for col, c in enumerate(action_indices):
            g, w = self._predictions(belief, c)
            out[col] = float(w @ g)
        return out

    def expected_min_cost(self, belief, action_indices, *, n_samples=256, rng=None):
        if rng is None:
            rng = core.substream(0)
        draws = belief.sample_thetas(n_samples, rng)
        mins = np.full(n_samples, np.inf)
        for c in action_indices:
            vals = np.array([self._cost(t, c) for t in draws])
            mins = np.minimum(mins, vals)
        return float(mins.mean())

    def posterior(self, belief, candidate, outcome, min_ess=None):
        """Reweight the measured dopant's particles by the Gaussian likelihood.

        The degeneracy guard (when requested) applies to the effective
        sample size of the full product belief, not to the single dopant:
        a near-certain dopant posterior is legitimate information, not a
        failure of the particle representation.
        """
        i, _ = self.pair(candidate)
        g, _ = self._predictions(belief, candidate)
        z = (float(outcome) - g) / self.tau
        like = np.exp(-0.5 * z * z)
        updated = belief.dopants[i].reweighted(like)
        post = belief.with_dopant(i, updated)
        if min_ess is not None and post.effective_sample_size < min_ess:
            raise core.DegenerateBeliefError(
                f"effective sample size {post.effective_sample_size:.3f} "
                f"< {min_ess} after measuring candidate {candidate}")
        return post

    def sample_predictive(self, belief, candidate, n, rng):
        g, w = self._predictions(belief, candidate)
        picks = rng.choice(len(g), size=n, p=w)
        return g[picks] + self.tau * rng.standard_normal(n)

    def predictive_quadrature(self, belief, candidate):
        if self.outcome_method != "quadrature":
            return None
        g, w = self._predictions(belief, candidate)
        if self.quadrature_nodes == 1:
            return g, w
        nodes, weights = hermgauss(self.quadrature_nodes)
        outs = (g[:, None] + np.sqrt(2.0) * self.tau * nodes[None, :]).ravel()
        probs = (w[:, None] * weights[None, :] / np.sqrt(np.pi)).ravel()
        return outs, probs


def ibr_pair(problem: SurrogateProblem, belief: FactorizedParticleBelief
             ) -> tuple[int, int]:
    """Posterior-optimal (dopant, concentration); lexicographic on ties."""
    costs = problem.expected_costs(belief, range(problem.n_actions))
    return problem.pair(int(np.argmin(costs)))


def design_policy(problem: SurrogateProblem, belief: FactorizedParticleBelief,
                  config: core.DesignLoopConfig | None = None,
                  seed_key: tuple[int, ...] = (0,),
                  ) -> tuple[tuple[int, int], core.SelectionResult]:
    """One-step experiment selection through the generic engine."""
    result = core.select_experiment(belief, problem, config=config,
                                    seed_key=seed_key)
    return problem.pair(result.experiment), result


def simulate_environment(problem: SurrogateProblem,
                         belief: FactorizedParticleBelief,
                         seed: int) -> tuple[np.ndarray, Callable[[int], float]]:
    """Hidden truth drawn from the prior plus a noisy measurement callback."""
    rng = core.substream(seed, 7)
    truth = np.vstack([d.sample_thetas(1, rng)[0] for d in belief.dopants])

    def measure(candidate: int) -> float:
        i, j = problem.pair(candidate)
        g = problem.surrogate(truth[i, 0], truth[i, 1],
                              problem.concentrations[j])
        return g + problem.tau * rng.standard_normal()

    return truth, measure
