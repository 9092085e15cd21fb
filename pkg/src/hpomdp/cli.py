"""Command-line entry point: knowledge-base validation, hierarchy
initialization, goal requests against a simulated environment, and the
navigation benchmark."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_RUNTIME = 0, 1, 2, 3
BUNDLE_FORMAT = 1

log = logging.getLogger("hpomdp")


class ValidationFailure(Exception):
    pass


def _read(path) -> str:
    return Path(path).read_text()


def _load_kb(general: str, specific: str):
    from .kbmodel import parse_kb, validate
    kb = parse_kb(general, specific)
    report = validate(kb)
    if not report.ok:
        raise ValidationFailure(str(report))
    return kb


def _ground(kb):
    from .grounding import build_bottom, neighbor_pairs_bottom
    from .hierarchy import build_sst, lift_neighbors
    bp = build_bottom(kb)
    sst = build_sst(kb, bp)
    return bp, sst, lift_neighbors(sst, neighbor_pairs_bottom(kb, bp))


def _solver(args):
    from .pbvi import SolverParams
    return SolverParams(belief_points=args.points, expansions=args.expansions,
                        backup_sweeps=args.sweeps, seed=args.seed)


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(x) for x in text.replace("x", ",").split(","))
    except ValueError:
        raise ValidationFailure(f"bad --dims {text!r}; expected e.g. 2,2,2") from None
    if len(dims) != 3:
        raise ValidationFailure("--dims needs section,room,building sizes")
    return dims


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    from .navbench import EnvConfig, generate_environment
    cfg = EnvConfig(*_parse_dims(args.dims), kernel_sigma=args.sigma, seed=args.seed)
    world, general, specific = generate_environment(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "general.kb").write_text(general)
    (out / "specific.kb").write_text(specific)
    (out / "world.txt").write_text(world.render() + "\n")
    print(f"wrote {out / 'general.kb'} and {out / 'specific.kb'} ({len(world.cells)} cells)")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .kbmodel import parse_kb, validate
    kb = parse_kb(_read(args.general), _read(args.specific))
    report = validate(kb)
    print(report)
    return EXIT_OK if report.ok else EXIT_VALIDATION


def cmd_init(args) -> int:
    from .hierarchy import HierarchyParams, build_hierarchy, hierarchy_to_dict
    general, specific = _read(args.general), _read(args.specific)
    kb = _load_kb(general, specific)
    t0 = time.perf_counter()
    bp, sst, neighbors = _ground(kb)
    params = HierarchyParams(simulations=args.simulations, solver=_solver(args), seed=args.seed)
    h = build_hierarchy(bp, sst, neighbors, params)
    seconds = time.perf_counter() - t0
    bundle = {"format": BUNDLE_FORMAT, "general": general, "specific": specific,
              "hierarchy": hierarchy_to_dict(h)}
    Path(args.out).write_text(json.dumps(bundle, sort_keys=True))
    n_aa = sum(1 for _ in h.all_abstract_actions())
    print(f"levels={len(h.levels)} abstract_actions={n_aa} init_seconds={seconds:.3f}")
    return EXIT_OK


def load_bundle(path):
    """(hierarchy, knowledge base) from a bundle written by ``init``."""
    from .hierarchy import hierarchy_from_dict
    from .kbmodel import parse_kb
    data = json.loads(_read(path))
    if data.get("format") != BUNDLE_FORMAT:
        raise ValidationFailure(f"{path}: not a hierarchy bundle")
    kb = parse_kb(data["general"], data["specific"])
    bp, sst, neighbors = _ground(kb)
    return hierarchy_from_dict(data["hierarchy"], bp, sst, neighbors), kb


def _state(bp, text: str) -> int:
    key = tuple(text.split(","))
    if key not in bp.pomdp.state_index:
        raise ValidationFailure(f"unknown state {text!r}")
    return bp.pomdp.state_index[key]


def cmd_solve(args) -> int:
    from .executive import (ExecutionReport, SimulatedEnvironment, build_hierarchical_policy,
                            execute_hierarchical_policy)
    h, _ = load_bundle(args.bundle)
    bp = h.bp
    goal = bp.pomdp.states[_state(bp, args.goal)]
    n = bp.pomdp.n_states
    rng = np.random.default_rng(args.seed)
    if args.initial == "uniform":
        b0 = np.full(n, 1.0 / n)
        start = int(rng.integers(n))
    else:
        start = _state(bp, args.initial)
        b0 = np.zeros(n)
        b0[start] = 1.0
    hp = build_hierarchical_policy(goal, h, b0=b0)
    env = SimulatedEnvironment(bp.pomdp, start, rng)
    report = execute_hierarchical_policy(hp, b0, h, env,
                                         report=ExecutionReport(task_id=args.goal, seed=args.seed))
    report.success = env.true_state == bp.pomdp.state_index[goal] and not report.failed
    report.final_distance = _distance(h, env.true_state, bp.pomdp.state_index[goal])
    header = ",".join(ExecutionReport.FIELDS)
    text = header + "\n" + report.record() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    if report.failed:
        print(f"execution failed: {report.reason}", file=sys.stderr)
    return EXIT_OK


def _distance(h, s: int, goal: int) -> float:
    """Fewest bottom transitions from `s` to `goal` (inf if unreachable)."""
    from scipy.sparse import csgraph
    P = h.bp.pomdp
    adj = sum(P.transition)
    d = csgraph.shortest_path(adj, unweighted=True, indices=[s])[0, goal]
    return float(d)


def cmd_experiment(args) -> int:
    from . import navbench as nb
    configs = nb.table2(args.set)
    if args.sigma:
        sigmas = {float(x) for x in args.sigma.split(",")}
        configs = [c for c in configs if c.kernel_sigma in sigmas]
    if args.dims:
        dims = _parse_dims(args.dims)
        configs = [c for c in configs if c.dims == dims]
    if not configs:
        raise ValidationFailure("no configuration matches the --sigma/--dims filters")
    methods = tuple(args.methods.split(",")) if args.methods else nb.default_methods(args.set)
    bad = set(methods) - set(nb.METHODS)
    if bad:
        raise ValidationFailure(f"unknown methods {sorted(bad)}")
    records = nb.run_experiment(configs, methods, args.runs, args.seed, jobs=args.jobs)
    paths = nb.write_results(records, args.out)
    for s in nb.summarize(records):
        print(f"{s['config']:<16} {s['method']:<4} success={s['success_ratio']:.3f} "
              f"cost={s['path_cost'][0]:.3f} error={s['relative_error'][0]:.3f} "
              f"planning={s['planning_seconds'][0]:.3f}s init={s['init_seconds']:.1f}s")
    print(f"results in {paths['runs'].parent}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hpomdp", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def solver_flags(sp):
        sp.add_argument("--points", type=int, default=128, help="belief points per solve")
        sp.add_argument("--expansions", type=int, default=4)
        sp.add_argument("--sweeps", type=int, default=60, help="backup sweeps per solve")

    g = sub.add_parser("generate", help="write a navigation knowledge base")
    g.add_argument("--dims", default="2,2,2", help="cells per section, sections per room, rooms per building")
    g.add_argument("--sigma", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate", help="check a knowledge base")
    v.add_argument("--general", required=True)
    v.add_argument("--specific", required=True)
    v.set_defaults(func=cmd_validate)

    i = sub.add_parser("init", help="ground the knowledge base and build the hierarchy")
    i.add_argument("--general", required=True)
    i.add_argument("--specific", required=True)
    i.add_argument("--out", required=True, help="bundle file (JSON)")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--simulations", "-M", type=int, default=100)
    solver_flags(i)
    i.set_defaults(func=cmd_init)

    s = sub.add_parser("solve", help="plan and execute one goal request")
    s.add_argument("--bundle", required=True)
    s.add_argument("--goal", required=True, help="goal state, comma-separated values")
    s.add_argument("--initial", default="uniform", help="start state or 'uniform'")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="write the report record here")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("experiment", help="run the navigation benchmark")
    e.add_argument("--set", type=int, choices=(1, 2, 3), default=1)
    e.add_argument("--runs", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--sigma", help="comma-separated subset of kernel widths")
    e.add_argument("--dims", help="restrict to one dimension triple")
    e.add_argument("--methods", help="comma-separated subset of FP,TLP,HP")
    e.add_argument("--out", required=True, help="results directory")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    from .kbmodel import KBError, KBSyntaxError
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationFailure, KBSyntaxError, KBError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - surfaced verbatim with the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
