"""Dynamical network scenario with uncertain interaction priorities.

Nodes hold nonnegative integer values.  An interaction can fire when all
of its input and activator nodes are nonzero and all of its inhibitor
nodes are zero; firing applies integer deltas to node values.  When
several interactions are enabled at once, designated competing pairs are
ordered by Boolean priority bits (one bit per pair), and the winner is
the lowest-index enabled interaction not beaten by another enabled one.
Actions block a single interaction (or none); experiments measure one
priority bit with a known flip probability.

Fixture files are YAML documents; see :func:`load_network` for the
schema.  With R priority bits the uncertainty class {0,1}^R is enumerated
exactly (guarded at R <= 20), which makes every design quantity an exact
sum and lets the derived policy be cross-checked against the generic
engine.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import yaml

from . import core

__all__ = [
    "DivergenceError",
    "EnumerationLimitError",
    "GeneNetwork",
    "Interaction",
    "Trajectory",
    "build_problem",
    "design_policy",
    "load_network",
    "prior_belief",
    "simulate_trajectory",
    "trajectory_cost",
]

ENUMERATION_LIMIT = 20

_NORMS = {
    "l1": lambda d: float(np.abs(d).sum()),
    "l2": lambda d: float(np.sqrt((d * d).sum())),
    "linf": lambda d: float(np.abs(d).max()),
}


class DivergenceError(RuntimeError):
    """A trajectory hit the step cap without reaching a fixed point or cycle."""


class EnumerationLimitError(ValueError):
    """Too many priority bits for exact enumeration."""


@dataclass(frozen=True)
class Interaction:
    inputs: tuple[int, ...]
    activators: tuple[int, ...] = ()
    inhibitors: tuple[int, ...] = ()
    updates: tuple[tuple[int, int], ...] = ()

    def enabled(self, state: tuple[int, ...]) -> bool:
        return (all(state[i] > 0 for i in self.inputs)
                and all(state[i] > 0 for i in self.activators)
                and all(state[i] == 0 for i in self.inhibitors))

    def apply(self, state: tuple[int, ...]) -> tuple[int, ...]:
        new = list(state)
        for node, delta in self.updates:
            new[node] = max(0, new[node] + delta)
        return tuple(new)


@dataclass(frozen=True)
class GeneNetwork:
    n_nodes: int
    interactions: tuple[Interaction, ...]
    competing_pairs: tuple[tuple[int, int], ...]
    initial_states: tuple[tuple[int, ...], ...]
    initial_probs: tuple[float, ...]
    target: tuple[float, ...]
    actions: tuple[int | None, ...]  # interaction to block; None = no block
    deltas: tuple[float, ...]
    prior_bits: tuple[float, ...]
    max_steps: int = 200
    norm: str = "l1"
    cycle_mode: str = "mean"
    node_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_nodes < 1 or not self.interactions:
            raise ValueError("network needs nodes and interactions")
        if not self.competing_pairs:
            raise ValueError("at least one competing pair is required")
        if len(self.deltas) != len(self.competing_pairs):
            raise ValueError("one delta per competing pair is required")
        if any(not (0.0 <= d <= 0.5) for d in self.deltas):
            raise ValueError("deltas must lie in [0, 0.5]")
        if len(self.prior_bits) != len(self.competing_pairs):
            raise ValueError("one prior probability per competing pair is required")
        if abs(sum(self.initial_probs) - 1.0) > 1e-12:
            raise ValueError("initial state probabilities must sum to 1")
        if len(self.target) != self.n_nodes:
            raise ValueError("target vector length must equal node count")
        if self.norm not in _NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.cycle_mode not in ("mean", "first"):
            raise ValueError(f"unknown cycle mode {self.cycle_mode!r}")

    @property
    def n_bits(self) -> int:
        return len(self.competing_pairs)

    @property
    def n_actions(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class Trajectory:
    states: tuple[tuple[int, ...], ...]
    steady_state: tuple[float, ...]
    cyclic: bool = False


def _select_enabled(network: GeneNetwork, enabled: list[int],
                    bits: tuple[int, ...]) -> int:
    """Priority tournament: lowest-index enabled interaction not beaten."""
    if len(enabled) == 1:
        return enabled[0]
    beaten = set()
    enabled_set = set(enabled)
    for bit, (first, second) in zip(bits, network.competing_pairs):
        if first in enabled_set and second in enabled_set:
            beaten.add(second if bit else first)
    for idx in enabled:
        if idx not in beaten:
            return idx
    return enabled[0]  # dominance cycle: fall back to lowest index


def simulate_trajectory(network: GeneNetwork, x0, bits, blocked: int | None
                        ) -> Trajectory:
    """Deterministic trajectory from x0 under priority bits and one blocked interaction.

    Terminates at a fixed point or on state revisit (a cycle); the steady
    state of a cycle is the element-wise mean over the cycle (or its first
    state, per the network's ``cycle_mode``).
    """
    state = tuple(int(v) for v in x0)
    if len(state) != network.n_nodes or any(v < 0 for v in state):
        raise ValueError(f"invalid initial state {x0!r}")
    if blocked is not None and not (0 <= blocked < len(network.interactions)):
        raise IndexError(f"blocked interaction {blocked} out of range")
    bits = tuple(int(b) for b in bits)

    states = [state]
    seen = {state: 0}
    for _ in range(network.max_steps):
        enabled = [i for i, inter in enumerate(network.interactions)
                   if i != blocked and inter.enabled(state)]
        if not enabled:
            return Trajectory(tuple(states), tuple(float(v) for v in state))
        winner = _select_enabled(network, enabled, bits)
        state = network.interactions[winner].apply(state)
        if state in seen:
            cycle = states[seen[state]:]
            if network.cycle_mode == "mean":
                steady = tuple(np.mean(cycle, axis=0))
            else:
                steady = tuple(float(v) for v in cycle[0])
            states.append(state)
            return Trajectory(tuple(states), steady, cyclic=True)
        seen[state] = len(states)
        states.append(state)
    raise DivergenceError(
        f"no fixed point or cycle within {network.max_steps} steps "
        f"(x0={x0!r}, bits={bits!r}, blocked={blocked!r})")


def trajectory_cost(network: GeneNetwork, bits, action: int) -> float:
    """Expected distance of the steady state from the target over initial states."""
    blocked = network.actions[action]
    norm = _NORMS[network.norm]
    target = np.asarray(network.target, dtype=float)
    total = 0.0
    for x0, p in zip(network.initial_states, network.initial_probs):
        traj = simulate_trajectory(network, x0, bits, blocked)
        total += p * norm(np.asarray(traj.steady_state) - target)
    return total


def _all_bit_vectors(n_bits: int) -> list[tuple[int, ...]]:
    if n_bits > ENUMERATION_LIMIT:
        raise EnumerationLimitError(
            f"{n_bits} priority bits exceed the exact enumeration limit "
            f"of {ENUMERATION_LIMIT}")
    return list(itertools.product((0, 1), repeat=n_bits))


def prior_belief(network: GeneNetwork) -> core.DiscreteBelief:
    """Independent-bit prior over {0,1}^R as a discrete belief."""
    thetas = _all_bit_vectors(network.n_bits)
    probs = []
    for bits in thetas:
        p = 1.0
        for b, q in zip(bits, network.prior_bits):
            p *= q if b else (1.0 - q)
        probs.append(p)
    return core.DiscreteBelief([list(map(float, t)) for t in thetas], probs)


def _flip_probs(delta: float, bit_index: int):
    def probabilities(theta: np.ndarray) -> np.ndarray:
        bit = int(round(theta[bit_index]))
        p_one = (1.0 - delta) if bit == 1 else delta
        return np.array([1.0 - p_one, p_one])
    return probabilities


def build_problem(network: GeneNetwork) -> core.DesignProblem:
    """Generic design problem: blocking actions, noisy bit measurements."""

    @lru_cache(maxsize=None)
    def cached_cost(bits: tuple[int, ...], action: int) -> float:
        return trajectory_cost(network, bits, action)

    def cost(theta: np.ndarray, action: int) -> float:
        return cached_cost(tuple(int(round(v)) for v in theta), action)

    experiments = core.ExperimentSet(
        [core.FiniteOutcome(support=(0, 1), probabilities=_flip_probs(d, i))
         for i, d in enumerate(network.deltas)],
        labels=[f"measure_bit_{i}" for i in range(network.n_bits)],
    )
    labels = [f"block_{b}" if b is not None else "block_none"
              for b in network.actions]
    return core.DesignProblem(core.ActionSet(labels), experiments, cost)


def design_policy(network: GeneNetwork,
                  belief: core.DiscreteBelief | None = None
                  ) -> tuple[int, np.ndarray]:
    """Exact triple-expectation policy over (true bit, outcome, other bits).

    For each measurable bit i the value is
    ``E_{theta_i} E_{xi_i | theta_i} E_{theta \\ theta_i | theta_i}
    [C(theta, IBR(posterior after xi_i))]``; the chosen experiment is the
    minimizer (lowest index on ties).  Matches the generic engine's
    selection, whose design value differs only by the experiment-free term
    ``E[min_a C]``.
    """
    problem = build_problem(network)
    if belief is None:
        belief = prior_belief(network)
    n_bits = network.n_bits
    values = np.zeros(n_bits)
    action_idx = tuple(range(network.n_actions))

    for i in range(n_bits):
        delta = network.deltas[i]
        bit_col = np.rint(belief.thetas[:, i]).astype(int)
        total = 0.0
        for true_bit in (0, 1):
            mask = bit_col == true_bit
            p_bit = float(belief.weights[mask].sum())
            if p_bit == 0.0:
                continue
            # conditional prior over the remaining bits, given theta_i
            cond = belief.weights * mask / p_bit
            for outcome in (0, 1):
                p_out = (1.0 - delta) if outcome == true_bit else delta
                if p_out == 0.0:
                    continue
                post = problem.posterior(belief, i, outcome)
                costs = problem.expected_costs(post, action_idx)
                best = int(np.argmin(costs))
                inner = float(cond @ problem.cost_matrix(belief, (best,))[:, 0])
                total += p_bit * p_out * inner
        values[i] = total
    return int(np.argmin(values)), values


# ---------------------------------------------------------------------------
# Fixture files
# ---------------------------------------------------------------------------

_REQUIRED_KEYS = {"nodes", "interactions", "competing_pairs", "initial_states",
                  "target", "actions", "deltas"}
_OPTIONAL_KEYS = {"prior_bits", "max_steps", "norm", "cycle_mode", "node_labels"}
_INTERACTION_KEYS = {"inputs", "activators", "inhibitors", "updates"}


def load_network(path) -> GeneNetwork:
    """Parse a YAML network fixture.

    Schema (unknown keys are rejected)::

        nodes: 4                       # node count
        node_labels: [A, B, C, D]      # optional
        interactions:                  # firing condition + integer deltas
          - inputs: [0]
            activators: []             # optional
            inhibitors: []             # optional
            updates: [[0, -1], [1, 1]]
        competing_pairs: [[0, 1]]      # bit r = 1 -> first of pair wins
        actions: [2, 3]                # interaction to block; null = no block
        initial_states:
          - {state: [1, 0, 0, 0], prob: 1.0}
        target: [0, 1, 1, 0]           # desired steady-state vector
        deltas: [0.1]                  # per-bit measurement error
        prior_bits: [0.5]              # optional P(bit = 1), default 0.5
        max_steps: 200                 # optional
        norm: l1                       # optional: l1 | l2 | linf
        cycle_mode: mean               # optional: mean | first
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: fixture must be a mapping")
    unknown = set(raw) - _REQUIRED_KEYS - _OPTIONAL_KEYS
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    missing = _REQUIRED_KEYS - set(raw)
    if missing:
        raise ValueError(f"{path}: missing keys {sorted(missing)}")

    interactions = []
    for pos, item in enumerate(raw["interactions"]):
        bad = set(item) - _INTERACTION_KEYS
        if bad:
            raise ValueError(f"{path}: interaction {pos} has unknown keys {sorted(bad)}")
        interactions.append(Interaction(
            inputs=tuple(item.get("inputs", ())),
            activators=tuple(item.get("activators", ())),
            inhibitors=tuple(item.get("inhibitors", ())),
            updates=tuple((int(n), int(d)) for n, d in item.get("updates", ())),
        ))

    states, probs = [], []
    for pos, item in enumerate(raw["initial_states"]):
        if set(item) != {"state", "prob"}:
            raise ValueError(f"{path}: initial state {pos} must have keys state, prob")
        states.append(tuple(int(v) for v in item["state"]))
        probs.append(float(item["prob"]))

    n_pairs = len(raw["competing_pairs"])
    try:
        return GeneNetwork(
            n_nodes=int(raw["nodes"]),
            interactions=tuple(interactions),
            competing_pairs=tuple((int(a), int(b)) for a, b in raw["competing_pairs"]),
            initial_states=tuple(states),
            initial_probs=tuple(probs),
            target=tuple(float(v) for v in raw["target"]),
            actions=tuple(None if a is None else int(a) for a in raw["actions"]),
            deltas=tuple(float(d) for d in raw["deltas"]),
            prior_bits=tuple(float(p) for p in raw.get("prior_bits", [0.5] * n_pairs)),
            max_steps=int(raw.get("max_steps", 200)),
            norm=str(raw.get("norm", "l1")),
            cycle_mode=str(raw.get("cycle_mode", "mean")),
            node_labels=tuple(raw.get("node_labels", ())),
        )
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from exc
