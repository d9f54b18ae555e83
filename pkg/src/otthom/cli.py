"""Command-line harness: graph generation, validation, solvers, experiments.

Exit codes: 0 all assertions passed, 1 an embedded assertion failed,
2 usage/configuration error. All commands are deterministic for a fixed seed;
CSV outputs are byte-stable apart from a timestamp header line.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import experiments
from .cell import assemble_cell_problem, solve_cell
from .density import build_density_model
from .energy import MassDistribution
from .errors import ConfigError, OtthomError
from .generators import GeneratorSpec, generate
from .geodesic import GeodesicProblem, solve_geodesic
from .graph import EmbeddedGraph, Orthotope, validate_geometry
from .recovery import RecoveryParams, SmoothCurveSpec, assemble_recovery


def _default_seed() -> int:
    return int(os.environ.get("OTTHOM_SEED", "0"))


def _box_from_arg(text: str) -> Orthotope:
    data = json.loads(text)
    if isinstance(data, dict):
        return Orthotope.from_json(data)
    arr = np.asarray(data, dtype=float)
    return Orthotope(arr[0], arr[1])


def _write_rows(path, rows, provenance: str):
    keys = sorted({k for r in rows for k in r})
    rows = sorted(rows, key=lambda r: json.dumps({k: str(r.get(k)) for k in keys}))
    with open(path, "w", newline="") as fh:
        fh.write(f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')} provenance={provenance}\n")
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in keys})


def cmd_gen_graph(args) -> int:
    with open(args.spec) as fh:
        spec = GeneratorSpec.from_json(json.load(fh))
    if args.seed is not None:
        import dataclasses

        spec = dataclasses.replace(spec, seed=args.seed)
    graph = generate(spec)
    graph.save(args.out)
    side = {"vertices": graph.num_vertices, "edges": graph.num_edges}
    print(json.dumps({"written": args.out, **side}))
    return 0


def cmd_validate(args) -> int:
    graph = EmbeddedGraph.load(args.graph)
    box = _box_from_arg(args.box)
    rep = validate_geometry(
        graph, box, probe_spacing=args.probe_spacing, pair_samples=args.pair_samples,
        seed=args.seed or 0,
    )
    print(
        json.dumps(
            {
                "maxEdgeLength": rep.maxEdgeLength,
                "maxDegree": rep.maxDegree,
                "coveringRadiusOk": rep.coveringRadiusOk,
                "pathStretchOk": rep.pathStretchOk,
                "violations": rep.violations,
            }
        )
    )
    return 0 if rep.ok else 1


def cmd_cell(args) -> int:
    graph = EmbeddedGraph.load(args.graph)
    Q = _box_from_arg(args.box)
    v = np.asarray(json.loads(args.v), dtype=float)
    prob = assemble_cell_problem(graph, Q, v, args.eps, mode=args.mode)
    sol = solve_cell(prob, tol=args.tol)
    out = {"f_eps": sol.value, "energy": sol.energy, **sol.diagnostics}
    print(json.dumps(out, default=float))
    if args.csv:
        import csv as _csv
        import os as _os

        row = {
            "family": _os.path.basename(args.graph),
            "seed": args.seed if args.seed is not None else "",
            "eps": args.eps,
            "Q": json.dumps(Q.to_json()),
            "v": json.dumps(v.tolist()),
            "f_eps": sol.value,
            "divergence_residual": sol.diagnostics["divergence_residual"],
            "mass_residual": sol.diagnostics["mass_residual"],
        }
        exists = _os.path.exists(args.csv)
        with open(args.csv, "a", newline="") as fh:
            w = _csv.DictWriter(fh, fieldnames=list(row))
            if not exists:
                w.writeheader()
            w.writerow(row)
    return 0


def cmd_density(args) -> int:
    with open(args.family) as fh:
        fam = GeneratorSpec.from_json(json.load(fh))
    Q = _box_from_arg(args.box)
    eps_list = json.loads(args.eps_list)
    model = build_density_model(
        fam, args.directions, Q, eps_list, tol=args.tol, mode=args.mode,
        seeds=None if args.seed is None else [args.seed],
    )
    with open(args.out, "w") as fh:
        json.dump(model.to_json(), fh)
        fh.write("\n")
    print(json.dumps({"written": args.out, "convex_certificate": model.convex_certificate}))
    return 0


def cmd_geodesic(args) -> int:
    graph = EmbeddedGraph.load(args.graph)
    with open(args.endpoints) as fh:
        data = json.load(fh)
    m0 = MassDistribution(graph, np.asarray(data["m0"], dtype=float))
    m1 = MassDistribution(graph, np.asarray(data["m1"], dtype=float))
    prob = GeodesicProblem(graph, m0, m1, K=args.steps, tolerance=args.tol)
    res = solve_geodesic(prob)
    res.curve.save(args.out)
    report = {
        "action": res.action,
        "iterations": res.iterations,
        "status": res.status,
        "perturbed_init": res.perturbed_init,
    }
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh)
            fh.write("\n")
    print(json.dumps(report))
    return 0


def cmd_recover(args) -> int:
    with open(args.config) as fh:
        cfg = json.load(fh)
    spec = SmoothCurveSpec.translating_bump(
        n=int(cfg.get("n", 2)),
        velocity=cfg.get("velocity", (1.0, 0.0)),
        width=float(cfg.get("width", 1.0)),
        T=float(cfg.get("T", 1.0)),
    )
    params = RecoveryParams(
        h=float(cfg["h"]),
        delta=float(cfg["delta"]),
        eta=float(cfg["eta"]),
        eps=float(cfg["eps"]),
        alpha=cfg.get("alpha"),
    )
    res = assemble_recovery(spec, params)
    with open(args.out, "w") as fh:
        json.dump(res.audit, fh, default=float)
        fh.write("\n")
    print(json.dumps({k: v for k, v in res.audit.items() if isinstance(v, float)}, default=float))
    return 0


def cmd_experiment(args) -> int:
    res = experiments.run_experiment(args.name, seed=args.seed, threads=args.threads)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        prov = res.provenance()
        for row in res.rows:
            row.setdefault("provenance", prov)
            if args.seed is not None:
                row.setdefault("seed", args.seed)
        _write_rows(os.path.join(args.out, f"{res.name}.csv"), res.rows, prov)
    status = 0
    for desc, ok, detail in res.assertions:
        print(f"[{'PASS' if ok else 'FAIL'}] {res.name}: {desc} ({detail})")
        if not ok:
            status = 1
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otthom", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="default: env OTTHOM_SEED or 0")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-graph", help="generate a family graph to JSON")
    g.add_argument("spec", help="GeneratorSpec JSON file")
    g.add_argument("out")
    g.set_defaults(fn=cmd_gen_graph)

    v = sub.add_parser("validate", help="geometric validation of a graph JSON")
    v.add_argument("graph")
    v.add_argument("--box", required=True, help='e.g. "[[0,0],[4,4]]"')
    v.add_argument("--probe-spacing", type=float, default=0.5)
    v.add_argument("--pair-samples", type=int, default=64)
    v.set_defaults(fn=cmd_validate)

    c = sub.add_parser("cell", help="solve one cell problem")
    c.add_argument("graph")
    c.add_argument("--box", required=True)
    c.add_argument("--v", required=True, help='direction, e.g. "[1,0]"')
    c.add_argument("--eps", type=float, required=True)
    c.add_argument("--mode", choices=["pinned", "periodic"], default="periodic")
    c.add_argument("--tol", type=float, default=1e-9)
    c.add_argument("--csv", default=None, help="append a result row to this CSV")
    c.set_defaults(fn=cmd_cell)

    d = sub.add_parser("density", help="build a sampled density model")
    d.add_argument("family", help="GeneratorSpec JSON file")
    d.add_argument("--box", required=True)
    d.add_argument("--eps-list", required=True, help='e.g. "[0.25, 0.125]"')
    d.add_argument("--directions", type=int, default=4)
    d.add_argument("--mode", choices=["pinned", "periodic"], default="periodic")
    d.add_argument("--tol", type=float, default=1e-9)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_density)

    ge = sub.add_parser("geodesic", help="solve a transport geodesic")
    ge.add_argument("graph")
    ge.add_argument("endpoints", help='JSON with "m0" and "m1" vertex arrays')
    ge.add_argument("--steps", type=int, default=8)
    ge.add_argument("--tol", type=float, default=1e-8)
    ge.add_argument("--out", required=True)
    ge.add_argument("--report", default=None)
    ge.set_defaults(fn=cmd_geodesic)

    r = sub.add_parser("recover", help="run the recovery pipeline")
    r.add_argument("config", help="JSON with h, delta, eta, eps (+ optional curve fields)")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_recover)

    e = sub.add_parser("experiment", help="run a named experiment")
    e.add_argument("name", choices=sorted(experiments.EXPERIMENTS))
    e.add_argument("--out", default=None, help="directory for CSV output")
    e.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.seed is None:
        args.seed = _default_seed() if "OTTHOM_SEED" in os.environ else None
    try:
        return args.fn(args)
    except (ConfigError, OtthomError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
