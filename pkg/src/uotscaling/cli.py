"""Command-line entry point.

Exit status: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from typing import Optional

import numpy as np
from pydantic import ValidationError

from . import io
from .barycenter import BarycenterProblem, solve_barycenter
from .color import apply_color_map, barycentric_map, image_to_histogram
from .config import PROBLEMS, ExperimentConfig, MarginalConfig, load_config
from .divergences import DivergenceSpec
from .extensions import PushforwardProblem, pushforward, solve_generalized, solve_with_mass
from .flows import FlowEnergy, run_flow
from .geometry import build_cost_quadratic, gibbs_kernel
from .scaling import SolverError, solve_plain, solve_stabilized

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

log = logging.getLogger("uotscaling")


class ConfigError(ValueError):
    pass


# synthetic 1-D pair used when a config lists no marginals
_DEFAULT_MARGINALS = [
    MarginalConfig(generator="bumps", bumps=[(0.2, 0.05, 1.0), (0.55, 0.08, 0.6)], floor=0.01,
                   normalize=True),
    MarginalConfig(generator="bumps", bumps=[(0.75, 0.06, 1.2), (0.35, 0.04, 0.5)], floor=0.01,
                   normalize=True),
]


def _marginals(cfg, X, rng, base_dir, count):
    sources = cfg.marginals or _DEFAULT_MARGINALS
    if len(sources) < count:
        raise ConfigError(f"{cfg.kind} needs at least {count} marginals")
    return [m.build(X, rng, base_dir) for m in sources]


def _write_support(path, R, X, Y, threshold):
    i, j = np.nonzero(R > threshold)
    rows = [(int(a), int(b), float(R[a, b])) for a, b in zip(i, j)]
    io.write_table_csv(path, ["i", "j", "value"], rows)


def _summary(out, **kw):
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(kw, fh, indent=2, default=float)


def _run_transport(cfg, X, rng, base_dir, out):
    p, q = _marginals(cfg, X, rng, base_dir, 2)[:2]
    F1, F2 = cfg.first.build(p), cfg.second.build(q)
    C = cfg.cost.build(X, X)
    opts = cfg.solver.options()
    if cfg.solver.stabilized:
        rep = solve_stabilized(F1, F2, C, X, X, cfg.epsilon, opts)
    else:
        rep = solve_plain(F1, F2, gibbs_kernel(C, cfg.epsilon), X, X, cfg.epsilon, opts)
    x = X.points[:, 0]
    io.write_marginal_csv(os.path.join(out, "p.csv"), x, p)
    io.write_marginal_csv(os.path.join(out, "q.csv"), x, q)
    io.write_marginal_csv(os.path.join(out, "first_marginal.csv"), x, rep.plan.first_marginal())
    io.write_marginal_csv(os.path.join(out, "second_marginal.csv"), x, rep.plan.second_marginal())
    _write_support(os.path.join(out, "plan_support.csv"), rep.plan.density, X, X, cfg.plan_threshold)
    io.write_table_csv(os.path.join(out, "gap_history.csv"), ["k", "gap"],
                       [(k, float(g)) for k, g in enumerate(rep.gap_history)])
    _summary(out, iterations=rep.iterations, converged=rep.converged, primal=rep.primal,
             dual=rep.dual, total_mass=rep.plan.total_mass(),
             cost=rep.plan.transport_cost(C))


def _run_barycenter(cfg, X, rng, base_dir, out):
    ps = _marginals(cfg, X, rng, base_dir, 2)
    bc = cfg.barycenter
    if len(bc.weights) != len(ps):
        raise ConfigError("need one barycenter weight per marginal")
    C = cfg.cost.build(X, X)
    firsts = [cfg.first.build(p) for p in ps]
    pb = BarycenterProblem(X, X, np.stack(ps), bc.weights, [C] * len(ps), cfg.epsilon,
                           kind=bc.kind, lam=bc.lam, beta1=bc.beta1, beta2=bc.beta2,
                           first=firsts)
    sol = solve_barycenter(pb, cfg.solver.options())
    x = X.points[:, 0]
    io.write_marginal_csv(os.path.join(out, "barycenter.csv"), x, sol.barycenter)
    for k, p in enumerate(ps):
        io.write_marginal_csv(os.path.join(out, f"p{k}.csv"), x, p)
    _summary(out, iterations=sol.iterations, converged=sol.converged,
             mass=float(sol.barycenter @ X.weights))


def _run_flow(cfg, X, rng, base_dir, out):
    fc = cfg.flow
    if fc.energy == "two_species":
        init = np.stack(_marginals(cfg, X, rng, base_dir, 2)[:2])
    else:
        init = _marginals(cfg, X, rng, base_dir, 1)[0]
    if fc.energy == "entropy_fit":
        ref = _marginals(cfg, X, rng, base_dir, 2)[1]
        energy = FlowEnergy.entropy_fit(ref, fc.tau, fc.weight)
    elif fc.energy == "congestion":
        energy = FlowEnergy.congestion(fc.tau)
    else:
        energy = FlowEnergy(fc.energy, fc.tau, alpha=fc.alpha)
    C = cfg.cost.build(X, X)
    traj = run_flow(init, energy, X, C, fc.steps, cfg.epsilon, cfg.solver.options())
    x = X.points[:, 0]
    if energy.species == 2:
        for k in range(2):
            io.write_trajectory_csv(os.path.join(out, f"trajectory_{k}.csv"), traj.times, x,
                                    [d[k] for d in traj.densities])
    else:
        io.write_trajectory_csv(os.path.join(out, "trajectory.csv"), traj.times, x,
                                traj.densities)
    io.write_table_csv(os.path.join(out, "mass.csv"), ["t", "mass"],
                       list(zip(traj.times.tolist(), traj.masses(X.weights).tolist())))
    _summary(out, steps=fc.steps, iterations=[r.iterations for r in traj.reports])


def _run_mass(cfg, X, rng, base_dir, out):
    p, q = _marginals(cfg, X, rng, base_dir, 2)[:2]
    F1, F2 = cfg.first.build(p), cfg.second.build(q)
    F3 = cfg.mass.total.build([cfg.mass.reference])
    C = cfg.cost.build(X, X)
    rep = solve_with_mass(F1, F2, F3, C, X, X, cfg.epsilon, cfg.solver.options())
    x = X.points[:, 0]
    io.write_marginal_csv(os.path.join(out, "first_marginal.csv"), x, rep.plan.first_marginal())
    io.write_marginal_csv(os.path.join(out, "second_marginal.csv"), x, rep.plan.second_marginal())
    _write_support(os.path.join(out, "plan_support.csv"), rep.plan.density, X, X, cfg.plan_threshold)
    _summary(out, iterations=rep.iterations, converged=rep.converged,
             total_mass=rep.plan.total_mass(), cost=rep.plan.transport_cost(C))


def _run_generalized(cfg, X, rng, base_dir, out):
    """Multi-marginal transport with pairwise quadratic costs on ``X^N``."""
    ps = _marginals(cfg, X, rng, base_dir, 2)
    n, N = len(X), len(ps)
    if n**N > 2_000_000:
        raise ConfigError("product space too large for the generalized solver")
    idx = np.array(list(itertools.product(range(n), repeat=N)), dtype=np.intp)
    c = build_cost_quadratic(X, X).entries
    cost = sum(c[idx[:, a], idx[:, b]] for a in range(N) for b in range(a + 1, N))
    dz = np.prod(X.weights[idx], axis=1)
    pb = PushforwardProblem(dz, [idx[:, k] for k in range(N)], [X.weights] * N,
                            np.exp(-cost / cfg.epsilon),
                            [cfg.first.build(p) for p in ps], cfg.epsilon)
    res = solve_generalized(pb, cfg.solver.options())
    x = X.points[:, 0]
    for k in range(N):
        io.write_marginal_csv(os.path.join(out, f"marginal_{k}.csv"), x,
                              pushforward(idx[:, k], res.coupling, dz, X.weights))
    _summary(out, iterations=res.iterations, converged=res.converged,
             total_mass=float(res.coupling @ dz))


def _run_colortransfer(cfg, base_dir, out):
    cc = cfg.color
    if cc is None:
        raise ConfigError("colortransfer needs a 'color' section")
    src = io.read_ppm(os.path.join(base_dir, cc.source))
    tgt = io.read_ppm(os.path.join(base_dir, cc.target))
    hp = image_to_histogram(src, cc.resolution)
    hq = image_to_histogram(tgt, cc.resolution)
    Y = hp.space()
    p = hp.masses / hp.masses.sum()
    q = hq.masses / hq.masses.sum()
    C = build_cost_quadratic(Y, Y)
    K = gibbs_kernel(C, cfg.epsilon)
    rep = solve_plain(DivergenceSpec.equality(p), cfg.second.build(q), K, Y, Y,
                      cfg.epsilon, cfg.solver.options(), compute_values=False)
    T = barycentric_map(rep.plan, Y.points)
    img = apply_color_map(src, cc.resolution, T, keep_detail=cc.keep_detail)
    io.write_ppm(os.path.join(out, cc.output), img)
    _summary(out, iterations=rep.iterations, converged=rep.converged)


def run_experiment(cfg: ExperimentConfig, out: str, base_dir: str = ".") -> int:
    """Dispatch one experiment; returns the process exit status."""
    io.ensure_dir(out)
    rng = np.random.default_rng(cfg.seed)
    try:
        if cfg.kind == "colortransfer":
            _run_colortransfer(cfg, base_dir, out)
            return EXIT_OK
        X = cfg.space.build()
        runner = {
            "transport": _run_transport,
            "barycenter": _run_barycenter,
            "flow": _run_flow,
            "mass": _run_mass,
            "generalized": _run_generalized,
        }[cfg.kind]
        runner(cfg, X, rng, base_dir, out)
    except SolverError as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except (ConfigError, ValueError, OSError, IndexError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uotscaling",
                                     description="Entropic unbalanced transport experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in PROBLEMS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--max-iter", type=int)
        sp.add_argument("--seed", type=int)
    return parser


def main(argv: Optional[list] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg, base_dir = load_config(args.config)
        else:
            cfg, base_dir = ExperimentConfig(), "."
        if cfg.kind is not None and cfg.kind != args.command:
            raise ConfigError(f"config is for {cfg.kind!r}, not {args.command!r}")
        update = {"kind": args.command}
        if args.epsilon is not None:
            update["epsilon"] = args.epsilon
        if args.seed is not None:
            update["seed"] = args.seed
        data = cfg.model_dump()
        data.update(update)
        if args.max_iter is not None:
            data["solver"]["max_iter"] = args.max_iter
        cfg = ExperimentConfig.model_validate(data)
    except (ValidationError, ConfigError, OSError, json.JSONDecodeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    return run_experiment(cfg, args.out, base_dir)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
