"""Command line entry point: analyze, corona, synth and verify."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings

import numpy as np

from . import __version__
from .config import SCHEMA_VERSION, ConfigError, RunConfig, load_config, parse_probe
from .corona import CoronaDecomposition, build_corona
from .flatness import RugMap, alpha_coeff, batch_plane_fit, batch_ruler
from .graph_synth import Synthesis, TreeTruncated, limit_tau, synthesize, verify_graph
from .heis_core import DomainError
from .para_grid import descendants
from .projections_winding import NotFlatEnoughError
from .rugs import audit_bilipschitz
from .tunables import TUNABLES

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_TRUNCATED, EXIT_VERIFY = 0, 2, 3, 4, 5

CSV_HELP = """\
output files (written to --out):
  analyze.csv     n,k,l,y,t,side,beta,rho,alpha
                  one row per rectangle to [analyze] depth; coefficients on
                  the ball of radius C*side around the rectangle's centre
  analyze.json    summary with Carleson ratios per threshold
  corona.json     decomposition: per-generation columns and tree records
  trees.csv       id,n,k,l,angle,signature,type,members,depth,bvp_passed
  graph.json      levels with blend provenance, chart, axiom reports
  graph_grid.csv  y,t,tau,dtau  on the tree's normalised frame; blocks of
                  constant t are separated by blank lines (gnuplot layout)
  axioms.csv      level,axiom,value,bound,passed
  verify.json     approximation, bilipschitz and cone audits plus tau checks
  sweep.csv       eta,approximation,holder,corner_quadrics,passed  (--sweep)

exit codes: 0 ok, 2 configuration, 3 precondition, 4 tree truncated,
5 verification failure.  Environment variables HEIS_<SECTION>_<KEY> override
config keys (for example HEIS_CORONA_EPS=0.3); HEIS_CONFIG, HEIS_OUT,
HEIS_JOBS and HEIS_SEED supply defaults for the matching flags.
"""


def _dump(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"), allow_nan=True)
        fh.write("\n")


def _report(cfg: RunConfig, command: str, result: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "version": __version__,
            "config": cfg.as_dict(), "tunables": TUNABLES.as_dict(), "result": result}


def _build_rug(cfg: RunConfig) -> RugMap:
    f = cfg.rug.build()
    M = cfg.M_declared if cfg.M_declared is not None else f.M
    ok, low, high = audit_bilipschitz(f, M, seed=cfg.seed)
    if not ok:
        raise DomainError(f"rug {f.name} fails the bilipschitz audit at M = {M:g} "
                          f"(ratios in [{low:.4g}, {high:.4g}])")
    return RugMap(f.evaluate_arrays, M, f.name)


def cmd_analyze(cfg: RunConfig, out: str) -> int:
    f = _build_rug(cfg)
    rows = []
    for d in range(cfg.analyze_depth + 1):
        rects = list(descendants(cfg.root, cfg.root.n + d))
        cy = np.array([float(Q.center.y) for Q in rects])
        ct = np.array([float(Q.center.t) for Q in rects])
        rad = np.full(cy.size, cfg.analyze_C * rects[0].side)
        lines, samples = TUNABLES.corona_lines, TUNABLES.corona_samples
        beta = batch_plane_fit(f, cy, ct, rad, lines, samples, polish_above=0.0).beta
        rho = batch_ruler(f, cy, ct, rad, lines, samples, polish_above=0.0)
        for i, Q in enumerate(rects):
            alpha = alpha_coeff(f, Q, cfg.analyze_C)
            rows.append((Q.n, Q.k, Q.l, float(Q.center.y), float(Q.center.t), Q.side,
                         float(beta[i]), float(rho[i]), alpha))
    with open(os.path.join(out, "analyze.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "k", "l", "y", "t", "side", "beta", "rho", "alpha"])
        for r in rows:
            w.writerow([r[0], r[1], r[2]] + [repr(v) for v in r[3:]])
    measure = cfg.root.measure
    ratios = {}
    for thr in cfg.thresholds:
        ratios[repr(thr)] = {
            name: sum(r[5] ** 3 for r in rows if r[col] >= thr) / measure
            for name, col in (("beta", 6), ("rho", 7), ("alpha", 8))
        }
    summary = {"rectangles": len(rows), "rug": f.name, "M": f.M,
               "max": {"beta": max(r[6] for r in rows), "rho": max(r[7] for r in rows),
                       "alpha": max(r[8] for r in rows)},
               "carleson_ratios": ratios}
    _dump(os.path.join(out, "analyze.json"), _report(cfg, "analyze", summary))
    return EXIT_OK


def cmd_corona(cfg: RunConfig, out: str) -> int:
    f = _build_rug(cfg)
    errors, _ = cfg.corona.hierarchy(f.M)
    if errors:
        raise ConfigError("constant hierarchy: " + "; ".join(errors))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        dec = build_corona(f, cfg.root, cfg.corona, probes=cfg.probes, jobs=cfg.jobs,
                           signatures=cfg.signatures, bvp=cfg.bvp, bvp_limit=cfg.bvp_limit)
    for msg in dec.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    _dump(os.path.join(out, "corona.json"), _report(cfg, "corona", dec.to_dict()))
    with open(os.path.join(out, "trees.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "n", "k", "l", "angle", "signature", "type", "members", "depth", "bvp_passed"])
        for T in dec.trees:
            bvp = dec.bvp.get(T.tree_id) or {}
            w.writerow([T.tree_id, T.root.n, T.root.k, T.root.l, repr(T.angle), T.signature,
                        dec.tree_types.get(T.tree_id), T.member_count(), T.depth,
                        "" if bvp.get("skipped") or not bvp else bvp.get("passed")])
    C1, C2 = dec.packing_report
    print(f"corona: {len(dec.trees)} trees, {dec.bad_count()} bad rectangles, C1 = {C1:.4g}, C2 = {C2:.4g}")
    return EXIT_OK


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from None


def _grid_rows(G, cfg: RunConfig):
    lo, hi = G.synth.y_window
    m = G.synth.sparams.y_margin
    ys = np.linspace(lo + m, hi - m, cfg.grid_y)
    ts = np.linspace(0.0, 1.0, cfg.grid_t)
    for t in ts:
        val, der = G.tau(ys, np.full(ys.shape, t))
        yield [(float(y), float(t), float(v), float(d)) for y, v, d in zip(ys, val, der)]


def cmd_synth(cfg: RunConfig, out: str, corona_path: str | None, tree_id: int | None) -> int:
    f = _build_rug(cfg)
    data = _load_json(corona_path or os.path.join(out, "corona.json"), "corona output")
    try:
        dec = CoronaDecomposition.from_dict(data["result"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"corona output is malformed: missing {exc}") from None
    tid = cfg.tree if tree_id is None else tree_id
    if not 0 <= tid < len(dec.trees):
        raise ConfigError(f"tree id {tid} out of range (0..{len(dec.trees) - 1})")
    synth = synthesize(f, dec, dec.trees[tid], cfg.synth)
    G = limit_tau(synth)
    result = synth.to_dict()
    result["error_budget"] = G.error_budget
    _dump(os.path.join(out, "graph.json"), _report(cfg, "synth", result))
    with open(os.path.join(out, "graph_grid.csv"), "w") as fh:
        fh.write("# y,t,tau,dtau\n")
        for block in _grid_rows(G, cfg):
            for row in block:
                fh.write(",".join(repr(v) for v in row) + "\n")
            fh.write("\n")
    failed = []
    with open(os.path.join(out, "axioms.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "axiom", "value", "bound", "passed"])
        for r in synth.reports:
            for key in r.values:
                w.writerow([r.n, key, repr(r.values[key]), repr(r.bounds[key]), r.passed[key]])
                if not r.passed[key]:
                    failed.append(f"level {r.n} {key}")
    print(f"synth: tree {tid}, {synth.n_max} levels, theta = {synth.theta:.4g}, "
          f"axioms {'pass' if not failed else 'FAIL: ' + ', '.join(failed)}")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_verify(cfg: RunConfig, out: str, graph_path: str | None, sweep: bool) -> int:
    f = _build_rug(cfg)
    data = _load_json(graph_path or os.path.join(out, "graph.json"), "graph file")
    try:
        synth = Synthesis.from_dict(f, data["result"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"graph file is malformed: missing {exc}") from None
    G = limit_tau(synth)
    rep = verify_graph(G, pair_samples=cfg.verify_pairs, rect_samples=cfg.verify_rects, seed=cfg.seed)
    result = rep.as_dict()
    result["error_budget"] = G.error_budget
    if sweep:
        eta0 = synth.sparams.eta
        table = []
        tp = rep.tau_properties
        for eta in cfg.sweep:
            approx = rep.approximation["worst_ratio"] * eta0 / eta <= 1.0
            holder = tp["holder"]["value"] <= eta
            corner = max(tp["corner_quadrics"]["value_ratio"], tp["corner_quadrics"]["slope_ratio"]) <= eta
            table.append({"eta": eta, "approximation": approx, "holder": holder, "corner_quadrics": corner,
                          "passed": bool(approx and holder and corner and rep.bilipschitz["passed"]
                                         and rep.cone["passed"] and tp["curvature"]["passed"]
                                         and tp["t_separation"]["passed"])})
        result["sweep"] = table
        with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eta", "approximation", "holder", "corner_quadrics", "passed"])
            for row in table:
                w.writerow([repr(row["eta"]), row["approximation"], row["holder"], row["corner_quadrics"],
                            row["passed"]])
    _dump(os.path.join(out, "verify.json"), _report(cfg, "verify", result))
    a, b, c = rep.approximation, rep.bilipschitz, rep.cone
    print(f"verify: approximation worst ratio {a['worst_ratio']:.3g}, bilipschitz spread {b['spread']:.3g}, "
          f"cone L = {c['L']:.3g}: {'pass' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=os.environ.get("HEIS_CONFIG"), help="TOML run configuration")
    common.add_argument("--out", default=os.environ.get("HEIS_OUT", "heisrug-out"), help="output directory")
    common.add_argument("--jobs", type=int, default=None, help="worker processes for the corona sweep")
    common.add_argument("--seed", type=int, default=None, help="seed for audits and sampling")
    common.add_argument("--probe", action="append", default=[], metavar="n,k,l",
                        help="extra packing probe rectangle (repeatable)")
    parser = argparse.ArgumentParser(prog="heisrug", description=__doc__, epilog=CSV_HELP,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter
    sub.add_parser("analyze", parents=[common], help="flatness coefficients per rectangle",
                   epilog=CSV_HELP, formatter_class=fmt)
    sub.add_parser("corona", parents=[common], help="corona decomposition", epilog=CSV_HELP, formatter_class=fmt)
    p = sub.add_parser("synth", parents=[common], help="intrinsic graph for one tree", epilog=CSV_HELP,
                       formatter_class=fmt)
    p.add_argument("--tree", type=int, default=None, help="tree id (default: [synth] tree)")
    p.add_argument("--corona", default=None, help="corona.json (default: OUT/corona.json)")
    p = sub.add_parser("verify", parents=[common], help="audit a synthesised graph against the rug",
                       epilog=CSV_HELP, formatter_class=fmt)
    p.add_argument("--graph", default=None, help="graph.json (default: OUT/graph.json)")
    p.add_argument("--sweep", action="store_true", help="also tabulate pass/fail over [verify] sweep etas")
    return parser


def _env_int(name: str):
    raw = os.environ.get(name)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        jobs = args.jobs if args.jobs is not None else _env_int("HEIS_JOBS")
        seed = args.seed if args.seed is not None else _env_int("HEIS_SEED")
        if jobs is not None:
            if jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            cfg.jobs = jobs
        if seed is not None:
            cfg.seed = seed
        if args.probe:
            cfg.probes = cfg.probes + tuple(parse_probe(p) for p in args.probe)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.out)
        if args.command == "corona":
            return cmd_corona(cfg, args.out)
        if args.command == "synth":
            return cmd_synth(cfg, args.out, args.corona, args.tree)
        return cmd_verify(cfg, args.out, args.graph, args.sweep)
    except ConfigError as exc:
        print(f"heisrug: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TreeTruncated as exc:
        print(f"heisrug: tree truncated: {exc}", file=sys.stderr)
        return EXIT_TRUNCATED
    except (NotFlatEnoughError, DomainError) as exc:
        print(f"heisrug: precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
