"""Command-line front end: benchmark, scenario runs, and policy demos.

Subcommands
-----------
sim-quadratic    quadratic simulation study (MOCU vs KG), CSV + optional plot
gene-network     design values and sequential runs on a network fixture
surrogate        design values and sequential runs for dopant selection
kg-demo          side-by-side KG / EGO / generic-engine selections

Every subcommand is a deterministic function of (config, seed).  Config
files are YAML mappings checked strictly: unknown keys abort with the
offending line.  Output files are written atomically and each output
directory receives a copy of the resolved configuration with the package
version, so results stay attributable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
import yaml

from . import __version__, bench, core, gene_network, policies, surrogate
from .beliefs import CorrelatedGaussianBelief

__all__ = ["main"]


class ConfigError(Exception):
    pass


def _load_config(path, allowed: set[str]) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if node is None:
        return {}
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{path}:1: config must be a mapping")
    for key_node, _ in node.value:
        if key_node.value not in allowed:
            raise ConfigError(
                f"{path}:{key_node.start_mark.line + 1}: unknown key "
                f"{key_node.value!r} (allowed: {sorted(allowed)})")
    return data


def _write_resolved_config(out_dir: str, resolved: dict) -> None:
    payload = {"version": __version__, **resolved}
    bench._atomic_write(
        os.path.join(out_dir, "config.resolved.yaml"),
        lambda fh: yaml.safe_dump(payload, fh, sort_keys=True))


def _ensure_out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# sim-quadratic
# ---------------------------------------------------------------------------

_SIM_KEYS = {"runs", "iterations", "seed", "policies", "parallelism",
             "initial_actions", "n_theta_samples", "n_outcome_samples",
             "gpr_restarts", "shared_noise", "grid"}


def _cmd_sim_quadratic(args) -> int:
    cfg = _load_config(args.config, _SIM_KEYS) if args.config else {}
    for flag in ("runs", "iterations", "seed", "parallelism"):
        if getattr(args, flag) is not None:
            cfg[flag] = getattr(args, flag)
    if args.policies is not None:
        cfg["policies"] = [p.strip() for p in args.policies.split(",") if p.strip()]

    try:
        sim = bench.SimConfig(
            grid=tuple(cfg.get("grid", bench.DEFAULT_GRID)),
            runs=int(cfg.get("runs", 200)),
            iterations=int(cfg.get("iterations", 5)),
            initial_actions=int(cfg.get("initial_actions", 4)),
            n_theta_samples=int(cfg.get("n_theta_samples", 256)),
            n_outcome_samples=int(cfg.get("n_outcome_samples", 64)),
            master_seed=int(cfg.get("seed", 0)),
            policies=tuple(cfg.get("policies", ("mocu", "kg"))),
            gpr_restarts=int(cfg.get("gpr_restarts", 5)),
            shared_noise=bool(cfg.get("shared_noise", True)),
            parallelism=int(cfg.get("parallelism", 1)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    out_dir = _ensure_out_dir(args.out_dir)
    records = bench.run_benchmark(sim)
    failed = bench.failed_runs(records)
    agg = bench.aggregate(records)

    bench.write_raw_csv(records, os.path.join(out_dir, "raw.csv"))
    bench.write_aggregate_csv(agg, os.path.join(out_dir, "aggregate.csv"))
    if args.plot:
        bench.plot_aggregate(agg, os.path.join(out_dir, "opportunity_cost.svg"))
    _write_resolved_config(out_dir, {
        "subcommand": "sim-quadratic", "runs": sim.runs,
        "iterations": sim.iterations, "seed": sim.master_seed,
        "policies": list(sim.policies), "parallelism": sim.parallelism,
        "initial_actions": sim.initial_actions,
        "n_theta_samples": sim.n_theta_samples,
        "n_outcome_samples": sim.n_outcome_samples,
        "gpr_restarts": sim.gpr_restarts, "shared_noise": sim.shared_noise,
        "grid": list(sim.grid),
    })

    for row in agg:
        print(f"{row['policy']:>6s}  iter {row['iteration']}: "
              f"mean OC {row['mean_oc']:.4f} +/- {row['stderr']:.4f} "
              f"({row['n_runs']} runs)")
    if failed:
        frac = len(failed) / sim.runs
        print(f"warning: {len(failed)}/{sim.runs} runs had episode failures",
              file=sys.stderr)
        if frac >= 0.05:
            print("error: failure rate >= 5%", file=sys.stderr)
            return 1
    print(f"wrote {out_dir}/raw.csv and {out_dir}/aggregate.csv")
    return 0


# ---------------------------------------------------------------------------
# gene-network
# ---------------------------------------------------------------------------

_GENE_KEYS = {"fixture", "seed", "sequential", "budget", "stop_threshold"}


def _cmd_gene_network(args) -> int:
    cfg = _load_config(args.config, _GENE_KEYS) if args.config else {}
    fixture = args.fixture or cfg.get("fixture")
    if fixture is None:
        raise ConfigError("a fixture path is required (--fixture or config key)")
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    sequential = args.sequential or bool(cfg.get("sequential", False))
    budget = int(cfg.get("budget", 5))

    try:
        network = gene_network.load_network(fixture)
    except (ValueError, OSError, yaml.YAMLError) as exc:
        raise ConfigError(str(exc)) from exc

    problem = gene_network.build_problem(network)
    belief = gene_network.prior_belief(network)
    result = core.select_experiment(belief, problem)
    chosen, policy_values = gene_network.design_policy(network, belief)

    print(f"fixture: {fixture}")
    print(f"priority bits: {network.n_bits}, actions: {network.n_actions}, "
          f"MOCU: {result.mocu:.6g}")
    for i, dv in enumerate(result.design_values):
        marker = " <- selected" if i == result.experiment else ""
        print(f"  experiment {i} (delta={network.deltas[i]:g}): "
              f"design value {dv:.6g}{marker}")
    if chosen != result.experiment:
        print("error: policy and engine selections disagree", file=sys.stderr)
        return 1

    if args.out_dir:
        out_dir = _ensure_out_dir(args.out_dir)
        rows = [{"experiment": i, "delta": network.deltas[i],
                 "design_value": result.design_values[i],
                 "selected": int(i == result.experiment)}
                for i in range(network.n_bits)]
        bench._atomic_write(
            os.path.join(out_dir, "design_values.csv"),
            lambda fh: _write_rows(fh, rows))
        _write_resolved_config(out_dir, {
            "subcommand": "gene-network", "fixture": str(fixture),
            "seed": seed, "sequential": sequential, "budget": budget})

    if sequential:
        rng = core.substream(seed, 21)
        true_bits = tuple(int(rng.random() < p) for p in network.prior_bits)
        print(f"sequential run against hidden bits {true_bits}")

        def environment(experiment: int) -> int:
            flip = rng.random() < network.deltas[experiment]
            return 1 - true_bits[experiment] if flip else true_bits[experiment]

        loop_cfg = core.DesignLoopConfig(budget=budget, rng_seed=seed)
        record = core.run_design_loop(problem, belief, loop_cfg, environment)
        print(f"  initial best action {record.initial_best_action}, "
              f"MOCU {record.initial_mocu:.6g}")
        for step in record.steps:
            print(f"  step {step.step}: experiment {step.experiment} -> "
                  f"outcome {step.outcome}, best action {step.best_action}, "
                  f"remaining MOCU {step.mocu:.6g}")
        if record.stopped_by_threshold:
            print("  stopped: below improvement threshold")
    return 0


def _write_rows(fh, rows: list[dict]) -> None:
    import csv
    writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)


# ---------------------------------------------------------------------------
# surrogate
# ---------------------------------------------------------------------------

_SURROGATE_KEYS = {"dopants", "concentrations", "tau", "particles",
                   "particle_grid", "constants", "outcome_method",
                   "quadrature_nodes", "seed", "budget", "n_outcome_samples",
                   "sequential"}


def _default_particles(n_dopants: int, grid_spec: dict | None,
                       seed: int) -> tuple[core.DiscreteBelief, ...]:
    spec = grid_spec or {"h": [0.0, 2.0, 5], "r": [0.0, 2.0, 5]}
    h_lo, h_hi, h_n = spec["h"]
    r_lo, r_hi, r_n = spec["r"]
    hs = np.linspace(h_lo, h_hi, int(h_n))
    rs = np.linspace(r_lo, r_hi, int(r_n))
    pts = [(h, r) for h in hs for r in rs]
    weights = np.full(len(pts), 1.0 / len(pts))
    rng = core.substream(seed, 31)
    out = []
    for _ in range(n_dopants):
        jitter = rng.normal(0.0, 1e-3, size=(len(pts), 2))
        out.append(core.DiscreteBelief(np.asarray(pts) + jitter, weights))
    return tuple(out)


def _cmd_surrogate(args) -> int:
    cfg = _load_config(args.config, _SURROGATE_KEYS) if args.config else {}
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    n_dopants = int(cfg.get("dopants", 2))
    concentrations = tuple(cfg.get("concentrations", (0.5, 1.0)))
    tau = float(cfg.get("tau", 0.1))
    constants = cfg.get("constants", {})
    g = surrogate.default_surrogate(
        c1=float(constants.get("c1", 1.0)), c2=float(constants.get("c2", 1.0)),
        c3=float(constants.get("c3", 1.0)), c4=float(constants.get("c4", 0.1)))

    if "particles" in cfg:
        dopants = []
        for spec in cfg["particles"]:
            pts = [(float(h), float(r)) for h, r, _ in spec]
            ws = np.array([float(w) for _, _, w in spec])
            dopants.append(core.DiscreteBelief(pts, ws / ws.sum()))
        dopants = tuple(dopants)
        n_dopants = len(dopants)
    else:
        dopants = _default_particles(n_dopants, cfg.get("particle_grid"), seed)
    belief = surrogate.FactorizedParticleBelief(dopants)

    problem = surrogate.SurrogateProblem(
        g, n_dopants, concentrations, tau,
        outcome_method=str(cfg.get("outcome_method", "mc")),
        quadrature_nodes=int(cfg.get("quadrature_nodes", 1)))
    loop_cfg = core.DesignLoopConfig(
        budget=int(cfg.get("budget", 3)),
        mc_outcome_samples=int(cfg.get("n_outcome_samples", 64)),
        rng_seed=seed)

    (di, dj), result = surrogate.design_policy(problem, belief,
                                               config=loop_cfg,
                                               seed_key=(seed, 0))
    ibr = surrogate.ibr_pair(problem, belief)
    print(f"dopants: {n_dopants}, concentrations: {len(concentrations)}, "
          f"tau={tau:g}")
    print(f"current IBR pair: dopant {ibr[0]}, concentration index {ibr[1]}")
    print(f"estimated MOCU: {result.mocu:.6g}")
    for c, dv in zip(result.experiment_indices, result.design_values):
        i, j = problem.pair(c)
        marker = " <- selected" if c == result.experiment else ""
        print(f"  measure d{i}:o{j}: value {dv:.6g}{marker}")
    print(f"selected experiment: dopant {di}, concentration index {dj}")

    if args.out_dir:
        out_dir = _ensure_out_dir(args.out_dir)
        rows = [{"candidate": problem.actions.labels[c], "design_value": dv,
                 "selected": int(c == result.experiment)}
                for c, dv in zip(result.experiment_indices, result.design_values)]
        bench._atomic_write(os.path.join(out_dir, "design_values.csv"),
                            lambda fh: _write_rows(fh, rows))
        _write_resolved_config(out_dir, {
            "subcommand": "surrogate", "seed": seed, "dopants": n_dopants,
            "concentrations": list(concentrations), "tau": tau,
            "outcome_method": problem.outcome_method,
            "quadrature_nodes": problem.quadrature_nodes,
            "budget": loop_cfg.budget})

    if args.sequential or bool(cfg.get("sequential", False)):
        truth, environment = surrogate.simulate_environment(problem, belief, seed)
        print(f"sequential run against hidden parameters:\n{np.round(truth, 4)}")
        record = core.run_design_loop(problem, belief, loop_cfg, environment)
        print(f"  initial best pair {problem.pair(record.initial_best_action)}, "
              f"MOCU {record.initial_mocu:.6g}")
        for step in record.steps:
            print(f"  step {step.step}: measure {problem.actions.labels[step.experiment]}"
                  f" -> {step.outcome:.4f}, best pair "
                  f"{problem.pair(step.best_action)}, MOCU {step.mocu:.6g}")
    return 0


# ---------------------------------------------------------------------------
# kg-demo
# ---------------------------------------------------------------------------

_KG_KEYS = {"instances", "seed", "min_actions", "max_actions"}


def _random_instance(rng: np.random.Generator, n_min: int, n_max: int,
                     noise_free: bool) -> CorrelatedGaussianBelief:
    n = int(rng.integers(n_min, n_max + 1))
    mean = rng.normal(0.0, 2.0, size=n)
    w = rng.normal(0.0, 1.0, size=(n, n + 2))
    cov = w @ w.T / (n + 2) + 1e-6 * np.eye(n)
    lam = (np.zeros(n) if noise_free
           else rng.uniform(0.1, 2.0, size=n))
    return CorrelatedGaussianBelief(mean, cov, lam)


def _cmd_kg_demo(args) -> int:
    cfg = _load_config(args.config, _KG_KEYS) if args.config else {}
    instances = int(args.instances if args.instances is not None
                    else cfg.get("instances", 100))
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    n_min = int(cfg.get("min_actions", 2))
    n_max = int(cfg.get("max_actions", 10))

    disagreements = 0
    rng = core.substream(seed, 41)
    for k in range(instances):
        belief = _random_instance(rng, n_min, n_max, noise_free=False)
        problem = policies.ranking_problem(belief)
        kg_pick = policies.kg_policy(belief)
        engine = core.select_experiment(belief, problem, seed_key=(seed, k))
        agree = kg_pick == engine.experiment
        disagreements += not agree
        if not agree or k < 3:
            print(f"KG  instance {k}: A={len(belief)} "
                  f"kg={kg_pick} engine={engine.experiment} "
                  f"{'ok' if agree else 'MISMATCH'}")

    for k in range(instances):
        belief = _random_instance(rng, n_min, n_max, noise_free=True)
        problem = policies.ranking_problem(belief)
        theta = belief.sample_thetas(1, rng)[0]
        n_obs = int(rng.integers(1, len(belief)))
        observed = policies.ObservedSet((), ())
        for a in sorted(rng.choice(len(belief), size=n_obs, replace=False)):
            belief = belief.updated(int(a), float(theta[a]))
            observed = observed.with_observation(int(a), float(theta[a]))
        ego_pick = policies.ego_policy(belief, observed)
        unobserved = [i for i in range(len(belief)) if i not in observed]
        engine = core.select_experiment(
            belief, problem, seed_key=(seed, instances + k),
            actions=observed.actions, experiments=unobserved)
        agree = ego_pick == engine.experiment
        disagreements += not agree
        if not agree or k < 3:
            print(f"EGO instance {k}: A={len(belief)} "
                  f"ego={ego_pick} engine={engine.experiment} "
                  f"{'ok' if agree else 'MISMATCH'}")

    print(f"{2 * instances} instances, {disagreements} disagreements")
    return 0 if disagreements == 0 else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mocu-design",
        description="Sequential experimental design via expected "
                    "cost-of-uncertainty reduction.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file (strictly parsed)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("--log-level", default="WARNING",
                       help="logging level (default WARNING)")

    p = sub.add_parser("sim-quadratic", help="quadratic benchmark (MOCU vs KG)")
    common(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--policies", help="comma-separated subset of mocu,kg")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--plot", action="store_true", help="also write an SVG plot")
    p.set_defaults(func=_cmd_sim_quadratic, out_dir_required=True)

    p = sub.add_parser("gene-network", help="network-fixture design values")
    common(p)
    p.add_argument("--fixture", help="network fixture YAML")
    p.add_argument("--sequential", action="store_true",
                   help="also run a sequential design against a hidden truth")
    p.set_defaults(func=_cmd_gene_network, out_dir_required=False)

    p = sub.add_parser("surrogate", help="dopant-selection design values")
    common(p)
    p.add_argument("--sequential", action="store_true",
                   help="also run a sequential design against a hidden truth")
    p.set_defaults(func=_cmd_surrogate, out_dir_required=False)

    p = sub.add_parser("kg-demo", help="KG / EGO / engine agreement check")
    common(p)
    p.add_argument("--instances", type=int)
    p.set_defaults(func=_cmd_kg_demo, out_dir_required=False)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), None)
                        or logging.WARNING)
    if args.out_dir_required and not args.out_dir:
        print("error: --out-dir is required for this subcommand", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
