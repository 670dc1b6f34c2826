"""Command-line entry point.

Every subcommand reads a JSON config, validates it against a schema that
rejects unknown keys, runs the module call and writes artifacts stamped with
the config hash and seed.  Exit codes: 0 success, 1 solver failure, 2 config
error; failures also print a one-line JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import jsonschema
import numpy as np

from .chaos_lab import METRICS, ChaosConfig, run_experiment
from .errors import GraphonInvestError
from .fixed_point_finite import best_response_oracle, solve_equilibrium_det
from .graphon import (InteractionGraph, StepGraphon, complete_graph, cut_norm, empty_graph,
                      graphon_from_dict, normalized_weights, project_step, sample_admissible_graph)
from .graphon_game import LabelGrid, solve_graphon_equilibrium_det
from .indifference import (indifference_bisection, indifference_capital_finite,
                           indifference_capital_graphon)
from .market import AgentCoeffs, TimeGrid

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2

# ------------------------------------------------------------ schemas

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_vec = {"type": "array", "items": _num, "minItems": 1}
_pieces = {"anyOf": [_num, _vec, {"type": "array", "items": _vec, "minItems": 1}]}

DEFS = {
    "graphon": {
        "type": "object",
        "required": ["kind"],
        "properties": {
            "kind": {"enum": ["constant", "product", "min", "affine_mean", "step"]},
            "p": _num, "a": _num, "b": _num, "n_blocks": _pos_int,
            "weights": {"type": "array", "items": _vec},
        },
        "additionalProperties": False,
    },
    "set": {
        "type": "object",
        "required": ["kind"],
        "properties": {
            "kind": {"enum": ["full", "box", "ball", "halfspace", "orthant"]},
            "lower": _vec, "upper": _vec, "center": _vec, "radius": _num,
            "normal": _vec, "offset": _num,
        },
        "additionalProperties": False,
    },
    "coeffs": {
        "type": "object",
        "required": ["d", "sigma", "sigma_star", "theta", "eta"],
        "properties": {
            "d": _pos_int, "sigma": _pieces, "sigma_star": _pieces, "theta": _pieces,
            "eta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "xi": {"anyOf": [_num, {"type": "object", "required": ["mean", "sd"],
                                    "properties": {"mean": _num, "sd": {"type": "number", "minimum": 0}},
                                    "additionalProperties": False}]},
            "A": {"$ref": "#/$defs/set"},
        },
        "additionalProperties": False,
    },
    "coeff_list": {"anyOf": [{"$ref": "#/$defs/coeffs"},
                             {"type": "array", "items": {"$ref": "#/$defs/coeffs"}, "minItems": 1}]},
    "tgrid": {
        "type": "object",
        "required": ["T", "steps"],
        "properties": {"T": {"type": "number", "exclusiveMinimum": 0}, "steps": _pos_int},
        "additionalProperties": False,
    },
    "graph": {
        "type": "object",
        "required": ["kind", "n"],
        "properties": {
            "kind": {"enum": ["complete", "empty", "edges", "sample"]},
            "n": {"type": "integer", "minimum": 2},
            "beta_n": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "edges": {"type": "array", "items": {"type": "array", "items": {"type": "integer"},
                                                 "minItems": 2, "maxItems": 2}},
            "graphon": {"$ref": "#/$defs/graphon"},
            "max_retries": {"type": "integer", "minimum": 0},
        },
        "additionalProperties": False,
    },
}


def _schema(required, props):
    return {"$schema": "https://json-schema.org/draft/2020-12/schema", "$defs": DEFS,
            "type": "object", "required": required, "properties": props,
            "additionalProperties": False}


SCHEMAS = {
    "solve-finite": _schema(["graph", "coeffs", "tgrid"], {
        "graph": {"$ref": "#/$defs/graph"}, "coeffs": {"$ref": "#/$defs/coeff_list"},
        "tgrid": {"$ref": "#/$defs/tgrid"}, "tol": {"type": "number", "exclusiveMinimum": 0},
        "verify": {"type": "object", "properties": {
            "mc_paths": _pos_int, "agents": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "threshold_se": {"type": "number", "minimum": 0}}, "additionalProperties": False},
    }),
    "solve-graphon": _schema(["graphon", "M", "coeffs", "tgrid"], {
        "graphon": {"$ref": "#/$defs/graphon"}, "M": _pos_int,
        "coeffs": {"$ref": "#/$defs/coeffs"}, "tgrid": {"$ref": "#/$defs/tgrid"},
        "tol": {"type": "number", "exclusiveMinimum": 0},
    }),
    "chaos": _schema(["G", "n_schedule"], {
        "G": {"$ref": "#/$defs/graphon"},
        "n_schedule": {"type": "array", "items": {"type": "integer", "minimum": 3}, "minItems": 1},
        "beta_rule": {"type": "object", "required": ["kind"], "properties": {
            "kind": {"enum": ["constant", "power"]}, "beta": _num, "gamma": _num},
            "additionalProperties": False},
        "reps": _pos_int, "seed": {"type": "integer", "minimum": 0},
        "coeffs": {"$ref": "#/$defs/coeffs"}, "tgrid": {"$ref": "#/$defs/tgrid"},
        "cut_refinement": _pos_int, "max_retries": {"type": "integer", "minimum": 0},
        "xi_law": {"type": "object", "required": ["mean", "sd"], "properties": {
            "mean": _num, "sd": {"type": "number", "minimum": 0}}, "additionalProperties": False},
        "xi_draws": _pos_int,
    }),
    "indifference": _schema(["mode", "coeffs", "tgrid"], {
        "mode": {"enum": ["finite", "graphon"]},
        "graph": {"$ref": "#/$defs/graph"}, "graphon": {"$ref": "#/$defs/graphon"}, "M": _pos_int,
        "coeffs": {"$ref": "#/$defs/coeff_list"}, "tgrid": {"$ref": "#/$defs/tgrid"},
        "bisection": {"type": "object", "properties": {
            "agents": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "mc_paths": _pos_int, "tol": {"type": "number", "exclusiveMinimum": 0}},
            "additionalProperties": False},
    }),
    "sample-graph": _schema(["graphon", "n", "beta_n"], {
        "graphon": {"$ref": "#/$defs/graphon"}, "n": {"type": "integer", "minimum": 3},
        "beta_n": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "max_retries": {"type": "integer", "minimum": 0},
    }),
    "cut-norm": _schema(["A", "B"], {
        "A": {"$ref": "#/$defs/graphon"}, "B": {"$ref": "#/$defs/graphon"},
        "blocks": _pos_int, "heuristic": {"type": "boolean"},
    }),
}


class ConfigError(Exception):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


def validate(command: str, config: dict):
    """Raise ConfigError naming the first offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    err = jsonschema.exceptions.best_match(validator.iter_errors(config))
    if err is None:
        return
    path = [str(p) for p in err.absolute_path]
    if err.validator in ("required", "additionalProperties"):
        path.append(err.message.split("'")[1])
    raise ConfigError(err.message, ".".join(path) or None)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


# ------------------------------------------------------------ builders


def _coeff_list(spec, n=None):
    if isinstance(spec, list):
        cl = [AgentCoeffs.from_dict(c) for c in spec]
        if n is not None and len(cl) != n:
            raise ConfigError(f"{len(cl)} coefficient records for {n} agents", "coeffs")
        return cl
    c = AgentCoeffs.from_dict(spec)
    return [c] * n if n is not None else c


def _graph(spec: dict, seed: int):
    kind, n = spec["kind"], int(spec["n"])
    beta = float(spec.get("beta_n", 1.0))
    if kind == "complete":
        g = complete_graph(n, beta)
    elif kind == "empty":
        g = empty_graph(n, beta)
    elif kind == "edges":
        g = InteractionGraph.from_dict({"n": n, "beta_n": beta, "edges": spec.get("edges", [])})
    else:
        if "graphon" not in spec:
            raise ConfigError("sampled graph needs a graphon", "graph.graphon")
        G = graphon_from_dict(spec["graphon"])
        g, L, _ = sample_admissible_graph(project_step(G, n), n, beta, seed,
                                          int(spec.get("max_retries", 100)))
        return g, L
    return g, normalized_weights(g)


# ------------------------------------------------------------ artifacts


class Emitter:
    def __init__(self, out: Path, fmt: str, chash: str, seed: int):
        self.out, self.fmt, self.chash, self.seed = out, fmt, chash, seed
        out.mkdir(parents=True, exist_ok=True)
        self.written = []

    def json(self, name: str, command: str, result: dict):
        doc = {"command": command, "config_hash": self.chash, "seed": self.seed, "result": result}
        path = self.out / f"{name}.json"
        path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        self.written.append(str(path))

    def csv(self, name: str, body: str):
        # '#' lines are comments for gnuplot and for pandas.read_csv(comment="#")
        path = self.out / f"{name}.csv"
        path.write_text(f"# config_hash={self.chash}\n# seed={self.seed}\n" + body)
        self.written.append(str(path))


def _csv_from_writer(fn) -> str:
    buf = io.StringIO()
    fn(csv.writer(buf, lineterminator="\n"))
    return buf.getvalue()


def _file_csv(obj, **kw) -> str:
    """Render a record whose ``to_csv`` writes to a path."""
    fd, tmp = tempfile.mkstemp(suffix=".csv")
    os.close(fd)
    try:
        obj.to_csv(tmp, **kw)
        return Path(tmp).read_text().replace("\r\n", "\n")
    finally:
        os.unlink(tmp)


# ------------------------------------------------------------ commands


def cmd_solve_finite(cfg, args, em: Emitter) -> int:
    g, L = _graph(cfg["graph"], args.seed)
    n = L.shape[0]
    coeffs = _coeff_list(cfg["coeffs"], n)
    tgrid = TimeGrid(**cfg["tgrid"])
    eq = solve_equilibrium_det(L, coeffs, tgrid, tol=cfg.get("tol", 1e-10))
    if args.format == "json":
        em.json("solve_finite", "solve-finite", {"equilibrium": eq.to_dict(),
                                                  "graph": g.to_dict() if g is not None else None})
    else:
        em.csv("solve_finite", _file_csv(eq))
    print(" ".join(f"{v:.10g}" for v in eq.pi[:, 0, 0]))
    code = EXIT_OK
    if args.verify:
        vcfg = cfg.get("verify", {})
        paths = int(vcfg.get("mc_paths", 100_000))
        thr = float(vcfg.get("threshold_se", 3.0))
        rows = []
        for i in vcfg.get("agents", range(n)):
            br = best_response_oracle(i, eq, coeffs, L, tgrid, mc_paths=paths, seed=args.seed)
            ok = br.gain <= thr * br.gain_stderr
            rows.append({"agent": int(i), "gain": br.gain, "gain_stderr": br.gain_stderr,
                         "strategy": br.strategy.tolist(), "inconclusive": br.inconclusive,
                         "passed": bool(ok)})
            code = code if ok else EXIT_SOLVER
        em.json("verify", "solve-finite", {"threshold_se": thr, "agents": rows,
                                            "passed": code == EXIT_OK})
        print("nash verification:", "passed" if code == EXIT_OK else "FAILED")
    return code


def cmd_solve_graphon(cfg, args, em: Emitter) -> int:
    G = graphon_from_dict(cfg["graphon"])
    grid = LabelGrid(int(cfg["M"]))
    tgrid = TimeGrid(**cfg["tgrid"])
    eq = solve_graphon_equilibrium_det(G, grid, tgrid, _coeff_list(cfg["coeffs"]),
                                       tol=cfg.get("tol", 1e-10))
    if args.format == "json":
        em.json("solve_graphon", "solve-graphon", eq.to_dict())
    else:
        em.csv("solve_graphon", _file_csv(eq))
    return EXIT_OK


def cmd_chaos(cfg, args, em: Emitter) -> int:
    cfg = dict(cfg)
    cfg["seed"] = args.seed
    chaos = ChaosConfig.from_dict(cfg)
    report = run_experiment(chaos, threads=args.threads)
    if args.format == "json":
        em.json("chaos", "chaos", report.to_dict())
    else:
        em.csv("chaos", report.to_csv())
        # plot-ready means table, whitespace separated
        lines = ["# n " + " ".join(METRICS) + " bound"]
        for k, n in enumerate(report.n_schedule):
            vals = " ".join(repr(report.means[m][k]) for m in METRICS)
            lines.append(f"{n} {vals} {report.bound_values[k]!r}")
        path = em.out / "chaos_means.dat"
        path.write_text(f"# config_hash={em.chash}\n# seed={em.seed}\n" + "\n".join(lines) + "\n")
        em.written.append(str(path))
    print(report.summary())
    return EXIT_OK


def cmd_indifference(cfg, args, em: Emitter) -> int:
    tgrid = TimeGrid(**cfg["tgrid"])
    if cfg["mode"] == "graphon":
        for key in ("graphon", "M"):
            if key not in cfg:
                raise ConfigError(f"graphon mode needs {key!r}", key)
        G = graphon_from_dict(cfg["graphon"])
        grid = LabelGrid(int(cfg["M"]))
        coeffs = _coeff_list(cfg["coeffs"])
        eq = solve_graphon_equilibrium_det(G, grid, tgrid, coeffs)
        res = indifference_capital_graphon(eq, G, grid, coeffs)
        out = {"closed_form": res.to_dict()}
        key = "label"
    else:
        if "graph" not in cfg:
            raise ConfigError("finite mode needs 'graph'", "graph")
        _, L = _graph(cfg["graph"], args.seed)
        coeffs = _coeff_list(cfg["coeffs"], L.shape[0])
        eq = solve_equilibrium_det(L, coeffs, tgrid)
        res = indifference_capital_finite(eq, coeffs, L, tgrid)
        out = {"closed_form": res.to_dict()}
        key = "agent"
        if "bisection" in cfg:
            b = cfg["bisection"]
            out["bisection"] = [
                indifference_bisection(i, eq, coeffs, L, tgrid, mc_paths=int(b.get("mc_paths", 100_000)),
                                       seed=args.seed, tol=float(b.get("tol", 1e-6))).to_dict()
                for i in b.get("agents", [0])]
    if args.format == "json":
        em.json("indifference", "indifference", out)
    else:
        em.csv("indifference", _file_csv(res, key=key))
    print(" ".join(f"{v:.10g}" for v in np.atleast_1d(res.p)))
    return EXIT_OK


def cmd_sample_graph(cfg, args, em: Emitter) -> int:
    G = graphon_from_dict(cfg["graphon"])
    n = int(cfg["n"])
    g, _, rej = sample_admissible_graph(project_step(G, n), n, float(cfg["beta_n"]), args.seed,
                                        int(cfg.get("max_retries", 100)))
    if args.format == "json":
        em.json("sample_graph", "sample-graph", {"graph": g.to_dict(), "rejections": rej})
    else:
        em.csv("sample_graph", _csv_from_writer(
            lambda w: (w.writerow(["i", "j"]), [w.writerow(e) for e in g.edges()])))
    print(f"{len(g.edges())} edges, {rej} rejected draws")
    return EXIT_OK


def _as_step(spec: dict, blocks):
    G = graphon_from_dict(spec)
    if isinstance(G, StepGraphon):
        return G
    return project_step(G, blocks or 1)


def cmd_cut_norm(cfg, args, em: Emitter) -> int:
    blocks = cfg.get("blocks")
    A, B = _as_step(cfg["A"], blocks), _as_step(cfg["B"], blocks)
    res = cut_norm(A, B, heuristic=bool(cfg.get("heuristic", False)))
    out = {"value": res.value, "exact": res.exact, "rows": list(res.rows), "cols": list(res.cols)}
    if args.format == "json":
        em.json("cut_norm", "cut-norm", out)
    else:
        em.csv("cut_norm", f"value,exact\n{res.value!r},{res.exact}\n")
    print(f"{res.value:.12g}")
    return EXIT_OK


COMMANDS = {
    "solve-finite": cmd_solve_finite,
    "solve-graphon": cmd_solve_graphon,
    "chaos": cmd_chaos,
    "indifference": cmd_indifference,
    "sample-graph": cmd_sample_graph,
    "cut-norm": cmd_cut_norm,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphon-invest", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=0, help="64-bit seed (default 0)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--verify", action="store_true", help="run the Nash oracle (solve-finite)")
        p.add_argument("--threads", type=int, default=1)
    return ap


def _fail(kind: str, message: str, code: int, field=None) -> int:
    rec = {"error": kind, "message": message}
    if field is not None:
        rec["field"] = field
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not 0 <= args.seed < 2 ** 64:
        return _fail("config", "seed must be an unsigned 64-bit integer", EXIT_CONFIG, "seed")
    if args.threads < 1:
        return _fail("config", "threads must be >= 1", EXIT_CONFIG, "threads")
    try:
        config = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    try:
        validate(args.command, config)
    except ConfigError as exc:
        return _fail("schema", str(exc), EXIT_CONFIG, exc.field)
    em = Emitter(Path(args.out), args.format, config_hash(config), args.seed)
    try:
        return COMMANDS[args.command](config, args, em)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG, exc.field)
    except GraphonInvestError as exc:
        code = EXIT_CONFIG if exc.kind in ("parameter", "domain") and _is_config_stage(exc) else EXIT_SOLVER
        return _fail(exc.kind, str(exc), code)


def _is_config_stage(exc) -> bool:
    # ParameterError from constructing records means the config was inconsistent
    tb = exc.__traceback__
    while tb.tb_next is not None:
        tb = tb.tb_next
    return tb.tb_frame.f_code.co_name in ("__post_init__", "from_dict", "_pieces", "check_grid")


if __name__ == "__main__":
    sys.exit(main())
