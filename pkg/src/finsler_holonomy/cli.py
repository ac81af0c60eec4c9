"""Command-line front end: ``finsler-holonomy {inspect,algebra,holonomy,transport}``.

A run reads a TOML config, fills in every default, runs the requested
experiment blocks and writes one JSON report (plus CSV side files for
convergence tables).  Reports are deterministic given config and seed; only
the ``timings`` member varies between runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from . import __version__
from .algebra import (
    AlgebraOptions,
    generate_curvature_algebra,
    generate_infinitesimal_holonomy,
    riemannian_curvature_operator_algebra,
    riemannian_matching_residual,
    span_residual,
)
from .errors import ConfigError, DegenerateMetricError, FinslerError
from .fields import curvature_field, vector_field
from .geometry import christoffel_jet, connection_eval, riemann_tensor
from .models import check_model, fundamental_tensor, indicatrix_sample, load_model
from .transport import (
    HolonomyOptions,
    TransportOptions,
    berwald_translate_at,
    commutator_family_experiment,
    curvature_from_loops,
    curve_from_config,
    holonomy_algebra_at,
    holonomy_angle,
    parallel_transport,
    write_convergence_csv,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SCHEMA = "finsler-holonomy-report"
SCHEMA_VERSION = 1
COMMANDS = ("inspect", "algebra", "holonomy", "transport")
DEFAULT_SEED = 0

log = logging.getLogger("finsler_holonomy")


# -- config helpers ----------------------------------------------------------------

def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None


def _table(cfg: dict, key: str) -> dict:
    block = cfg.get(key, {})
    if not isinstance(block, dict):
        raise ConfigError(f"[{key}] must be a table")
    return block


def _check_keys(block: dict, allowed, where: str):
    unknown = set(block) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _point(value, n: int, what: str) -> np.ndarray:
    try:
        p = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a list of numbers") from None
    if p.shape != (n,):
        raise ConfigError(f"{what} must have {n} components")
    return p


def _points(value, n: int, what: str) -> np.ndarray:
    try:
        p = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a list of points") from None
    if p.ndim != 2 or p.shape[1] != n or len(p) == 0:
        raise ConfigError(f"{what} must be a non-empty list of {n}-component points")
    return p


def _positive_int(value, what: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"{what} must be a positive integer, got {value!r}")
    return value


def _steps(value, what: str) -> list:
    hs = [float(h) for h in value] if isinstance(value, list) else None
    if not hs or any(h <= 0 for h in hs):
        raise ConfigError(f"{what} must be a non-empty list of positive steps")
    return hs


def _vector(spec, n: int, what: str) -> np.ndarray:
    try:
        return vector_field(spec, n).constant_value()
    except FinslerError as exc:
        raise ConfigError(f"{what}: {exc}") from None


def _samples(model, x, block: dict, seed: int, default: int) -> np.ndarray:
    """Explicit ``y0`` list, else ``samples`` seeded indicatrix points."""
    if "y0" in block:
        y = np.atleast_2d(np.asarray(block["y0"], dtype=float))
        if y.ndim != 2 or y.shape[1] != model.dim:
            raise ConfigError(f"y0 must hold {model.dim}-component vectors")
        return y
    return indicatrix_sample(model, x, _positive_int(block.get("samples", default), "samples"), seed)


def _transport_opts(block: dict, defaults: dict) -> TransportOptions:
    d = dict(defaults)
    d.update({k: block[k] for k in TransportOptions.__dataclass_fields__ if k in block})
    return TransportOptions.from_dict(d)


def _algebra_opts(block: dict, seed: int) -> AlgebraOptions:
    d = {k: block[k] for k in AlgebraOptions.__dataclass_fields__ if k in block}
    d.setdefault("seed", seed)
    return AlgebraOptions.from_dict(d)


def _echo_opts(o) -> dict:
    d = asdict(o)
    return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}


def _run_blocks(fns, threads: int):
    """Run independent blocks, returning results in input order."""
    if threads <= 1 or len(fns) <= 1:
        return [f() for f in fns]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(f) for f in fns]
        return [fu.result() for fu in futures]


class Run:
    """Mutable state shared by a command: model, seed, flags, timings, files."""

    def __init__(self, cfg: dict, seed: int, threads: int, out: str | None):
        self.cfg = cfg
        self.seed = seed
        self.threads = threads
        self.out = out
        self.flags: list = []
        self.timings: dict = {}
        self.files: list = []
        self.model = None
        self.model_echo: dict = {}

    def timed(self, name, fn):
        t0 = time.perf_counter()
        out = fn()
        self.timings[name] = round(time.perf_counter() - t0, 6)
        return out

    def csv(self, stem: str, table) -> str | None:
        """Write a convergence table next to the report; returns its file name."""
        if self.out is None:
            return None
        base = os.path.splitext(self.out)[0]
        path = f"{base}.{stem}.csv"
        write_convergence_csv(path, table)
        self.files.append(os.path.basename(path))
        return os.path.basename(path)


def _load_model(run: Run):
    spec = run.cfg.get("model")
    if spec is None:
        raise ConfigError("config needs a [model] table")
    if not isinstance(spec, dict):
        raise ConfigError("[model] must be a table")
    _check_keys(spec, ("family", "dim", "name", "params", "check_points"), "[model]")
    echo = {"family": spec.get("family"), "dim": spec.get("dim", 2), "name": spec.get("name", spec.get("family")),
            "params": dict(spec.get("params", {}))}
    if "check_points" in spec:
        echo["check_points"] = spec["check_points"]
    run.model_echo = echo
    run.model = run.timed("model", lambda: load_model(spec))
    return run.model


# -- inspect -----------------------------------------------------------------------------

INSPECT_KEYS = ("points", "directions", "samples", "check_samples")


def cmd_inspect(run: Run):
    model = _load_model(run)
    n = model.dim
    block = _table(run.cfg, "inspect")
    _check_keys(block, INSPECT_KEYS, "[inspect]")
    points = _points(block.get("points", [[0.0] * n]), n, "inspect.points")
    check_samples = _positive_int(block.get("check_samples", 64), "inspect.check_samples")
    samples = _positive_int(block.get("samples", 4), "inspect.samples")
    directions = None
    if "directions" in block:
        directions = _points(block["directions"], n, "inspect.directions")
    echo = {"points": points.tolist(), "check_samples": check_samples}
    if directions is not None:
        echo["directions"] = directions.tolist()
    else:
        echo["samples"] = samples
    run.timed("validate", lambda: check_model(model, points, samples=check_samples, seed=run.seed))

    def one(p):
        ys = directions if directions is not None else indicatrix_sample(model, p, samples, run.seed)
        met = fundamental_tensor(model, p, ys)
        conn = connection_eval(model, p, ys)
        rec = {
            "x": p.tolist(),
            "y": ys.tolist(),
            "F": model.F(p, ys).tolist(),
            "g": met.g.tolist(),
            "G": conn.G.tolist(),
            "Gj": conn.Gj.tolist(),
            "R": conn.R.tolist(),
            "max_abs_R": float(np.max(np.abs(conn.R))),
        }
        if model.is_riemannian:
            gam = christoffel_jet(model, p).value
            Rm = riemann_tensor(model, p)
            G_oracle = 0.5 * np.einsum("ijk,sj,sk->si", gam, ys, ys)
            R_oracle = -np.einsum("iljk,sl->sijk", Rm, ys)
            rec["oracle"] = {
                "method": "Levi-Civita symbols from a_ij(x)",
                "spray_residual": float(np.max(np.abs(conn.G - G_oracle))),
                "curvature_residual": float(np.max(np.abs(conn.R - R_oracle))),
            }
        return rec

    recs = run.timed("points", lambda: _run_blocks([lambda p=p: one(p) for p in points], run.threads))
    notes = []
    for rec in recs:
        o = rec.get("oracle")
        if o is None:
            continue
        ok = o["curvature_residual"] <= 1e-9 and o["spray_residual"] <= 1e-9
        notes.append(f"x={rec['x']}: curvature {'matches' if ok else 'DIFFERS FROM'} the Christoffel oracle "
                     f"(residual {o['curvature_residual']:.2e})")
        if not ok:
            run.flags.append(f"oracle mismatch at x={rec['x']}")
    results = {"model_valid": True, "points": recs, "notes": notes}
    return echo, results


# -- algebra -----------------------------------------------------------------------------

ALGEBRA_KEYS = ("point", "compute", "riemannian_check") + tuple(AlgebraOptions.__dataclass_fields__)


def cmd_algebra(run: Run):
    model = _load_model(run)
    n = model.dim
    block = _table(run.cfg, "algebra")
    _check_keys(block, ALGEBRA_KEYS, "[algebra]")
    p = _point(block.get("point", [0.0] * n), n, "algebra.point")
    compute = block.get("compute", ["curvature", "infinitesimal"])
    if not isinstance(compute, list) or not compute or set(compute) - {"curvature", "infinitesimal"}:
        raise ConfigError("algebra.compute must be a non-empty subset of ['curvature', 'infinitesimal']")
    opts = _algebra_opts(block, run.seed)
    riem = bool(block.get("riemannian_check", True))
    echo = {"point": p.tolist(), "compute": list(compute), "riemannian_check": riem, **_echo_opts(opts)}
    results = {}
    bases = {}
    if "curvature" in compute:
        b = run.timed("curvature_algebra", lambda: generate_curvature_algebra(model, p, opts))
        bases["curvature"] = b
        results["curvature_algebra"] = b.to_record()
        run.flags += [f"curvature_algebra: {f}" for f in b.flags]
    if "infinitesimal" in compute:
        b = run.timed("infinitesimal_holonomy", lambda: generate_infinitesimal_holonomy(model, p, opts))
        bases["infinitesimal"] = b
        results["infinitesimal_holonomy"] = b.to_record()
        run.flags += [f"infinitesimal_holonomy: {f}" for f in b.flags]
    if len(bases) == 2:
        lo, hi = bases["curvature"], bases["infinitesimal"]
        # both bases share one seeded sample set
        res = span_residual(hi.normalized_matrix(), lo.normalized_matrix()) if lo.rank else 0.0
        results["inclusion"] = {"curvature_rank": lo.rank, "infinitesimal_rank": hi.rank,
                                "ordered": lo.rank <= hi.rank, "span_residual": float(res)}
    if riem and model.is_riemannian and "curvature" in bases:
        alg = riemannian_curvature_operator_algebra(model, p, opts.tol, opts.zero_tol)
        results["riemannian_check"] = {
            "operator_algebra_dim": alg.dim,
            "field_rank": bases["curvature"].rank,
            "ranks_agree": alg.dim == bases["curvature"].rank,
            "matching_residual": float(riemannian_matching_residual(bases["curvature"], alg)),
        }
    return echo, results


# -- transport ---------------------------------------------------------------------------

TRANSPORT_KEYS = ("curves", "samples", "y0", "seed") + tuple(TransportOptions.__dataclass_fields__)


def cmd_transport(run: Run):
    model = _load_model(run)
    block = _table(run.cfg, "transport")
    _check_keys(block, TRANSPORT_KEYS, "[transport]")
    opts = _transport_opts(block, {})
    curves_cfg = block.get("curves")
    if not isinstance(curves_cfg, list) or not curves_cfg:
        raise ConfigError("[transport] needs a non-empty 'curves' list")
    curves = [curve_from_config(c, model) for c in curves_cfg]
    echo = {"curves": [c.to_record() for c in curves], **_echo_opts(opts)}
    if "y0" in block:
        echo["y0"] = block["y0"]
    else:
        echo["samples"] = block.get("samples", 8)

    def one(curve):
        y0 = _samples(model, curve.start, block, run.seed, 8)
        res = parallel_transport(model, curve, y0, opts)
        rec = {"curve": curve.to_record(), "y0": y0.tolist(), **res.to_record()}
        if np.allclose(curve.start, curve.end):
            rec["holonomy_displacement"] = float(np.max(np.abs(res.y_end - y0)))
        return rec

    recs = run.timed("curves", lambda: _run_blocks([lambda c=c: one(c) for c in curves], run.threads))
    return echo, {"transports": recs, "max_F_drift": max(r["F_drift"] for r in recs)}


# -- holonomy ------------------------------------------------------------------------------

HOLONOMY_KEYS = ("point", "samples", "loops", "triangles", "translates", "algebra", "commutator")
LOOP_DEFAULTS = {"rtol": 1e-13, "atol": 1e-15}
COMMUTATOR_DEFAULTS = {"rtol": 1e-12, "atol": 1e-15}
GENERAL_DEFAULTS = {"rtol": 1e-10, "atol": 1e-13}


def _loops(run, model, p, y, specs):
    n = model.dim
    jobs, echo = [], []
    for k, spec in enumerate(specs):
        _check_keys(spec, ("X", "Y", "h") + tuple(TransportOptions.__dataclass_fields__), f"holonomy.loops[{k}]")
        X = _vector(spec.get("X", "e1"), n, "loop X")
        Y = _vector(spec.get("Y", "e2"), n, "loop Y")
        hs = _steps(spec.get("h", [2e-2, 1e-2, 5e-3]), "loop h")
        opts = _transport_opts(spec, LOOP_DEFAULTS)
        echo.append({"X": X.tolist(), "Y": Y.tolist(), "h": hs, **_echo_opts(opts)})
        jobs.append(lambda X=X, Y=Y, hs=hs, opts=opts: curvature_from_loops(model, p, X, Y, hs, y, opts))
    results = _run_blocks(jobs, run.threads)
    recs = []
    for k, (res, e) in enumerate(zip(results, echo)):
        rec = {"X": e["X"], "Y": e["Y"], **res.to_record()}
        rec["csv"] = run.csv(f"loops{k}", res.table)
        run.flags += [f"loops[{k}]: {w}" for w in res.warnings]
        recs.append(rec)
    return echo, recs


def _triangles(run, model, specs):
    n = model.dim
    jobs, echo = [], []
    for k, spec in enumerate(specs):
        _check_keys(spec, ("vertices", "y0", "expected") + tuple(TransportOptions.__dataclass_fields__),
                    f"holonomy.triangles[{k}]")
        if "vertices" not in spec:
            raise ConfigError(f"holonomy.triangles[{k}] needs 'vertices'")
        verts = _points(spec["vertices"], n, "triangle vertices")
        y0 = _point(spec.get("y0", [1.0] + [0.0] * (n - 1)), n, "triangle y0")
        opts = _transport_opts(spec, GENERAL_DEFAULTS)
        e = {"vertices": verts.tolist(), "y0": y0.tolist(), **_echo_opts(opts)}
        if "expected" in spec:
            e["expected"] = float(spec["expected"])
        echo.append(e)

        def job(verts=verts, y0=y0, opts=opts):
            curve = curve_from_config({"kind": "geodesic_triangle", "vertices": verts.tolist()}, model)
            return holonomy_angle(model, curve, y0, opts)

        jobs.append(job)
    angles = _run_blocks(jobs, run.threads)
    recs = []
    for e, a in zip(echo, angles):
        rec = {"vertices": e["vertices"], "angle": a}
        if "expected" in e:
            rec["expected"] = e["expected"]
            rec["error"] = abs(a - e["expected"])
        recs.append(rec)
    return echo, recs


def _translates(run, model, p, y, specs):
    n = model.dim
    jobs, echo = [], []
    for k, spec in enumerate(specs):
        _check_keys(spec, ("curve", "X", "Y") + tuple(TransportOptions.__dataclass_fields__),
                    f"holonomy.translates[{k}]")
        if "curve" not in spec:
            raise ConfigError(f"holonomy.translates[{k}] needs a 'curve'")
        curve = curve_from_config(spec["curve"], model)
        if not np.allclose(curve.end, p, atol=1e-12):
            raise ConfigError(f"holonomy.translates[{k}]: curve must end at the point p")
        X = _vector(spec.get("X", "e1"), n, "translate X")
        Y = _vector(spec.get("Y", "e2"), n, "translate Y")
        opts = _transport_opts(spec, GENERAL_DEFAULTS)
        echo.append({"curve": curve.to_record(), "X": X.tolist(), "Y": Y.tolist(), **_echo_opts(opts)})

        def job(curve=curve, X=X, Y=Y, opts=opts):
            xi = curvature_field(model, X, Y)
            vals = berwald_translate_at(model, curve, xi, y, opts)
            rec = {"field": xi.provenance, "values": vals.tolist()}
            if np.allclose(curve.start, curve.end):
                rec["roundtrip_residual"] = float(np.max(np.abs(vals - xi.evaluate(p, y))))
            return rec

        jobs.append(job)
    return echo, _run_blocks(jobs, run.threads)


def _hol_algebra(run, model, p, spec):
    _check_keys(spec, ("sources", "transport") + tuple(AlgebraOptions.__dataclass_fields__)
                + tuple(HolonomyOptions.__dataclass_fields__), "holonomy.algebra")
    sources = [curve_from_config(c, model) for c in spec.get("sources", [])]
    aopts = _algebra_opts(spec, run.seed)
    hopts = HolonomyOptions.from_dict({k: spec[k] for k in HolonomyOptions.__dataclass_fields__ if k in spec})
    topts = _transport_opts(_table(spec, "transport"), GENERAL_DEFAULTS)
    echo = {"sources": [c.to_record() for c in sources], **_echo_opts(aopts), **_echo_opts(hopts),
            "transport": _echo_opts(topts)}
    b = run.timed("holonomy_algebra", lambda: holonomy_algebra_at(model, p, sources, aopts, topts, hopts))
    run.flags += [f"holonomy_algebra: {f}" for f in b.flags]
    rec = b.to_record()
    rec["infinitesimal_rank"] = b.options["infinitesimal_rank"]
    return echo, rec


def _commutator(run, model, p, y, spec):
    n = model.dim
    _check_keys(spec, ("loop1", "loop2", "h", "absolute") + tuple(TransportOptions.__dataclass_fields__),
                "holonomy.commutator")
    loops = []
    for key, default in (("loop1", ["e1", "e2"]), ("loop2", ["e1", "e2"])):
        pair = spec.get(key, default)
        if not isinstance(pair, list) or len(pair) != 2:
            raise ConfigError(f"holonomy.commutator.{key} must be a pair of vectors")
        loops.append(tuple(_vector(v, n, f"commutator {key}") for v in pair))
    hs = _steps(spec.get("h", [0.1, 0.05]), "commutator h")
    opts = _transport_opts(spec, COMMUTATOR_DEFAULTS)
    absolute = bool(spec.get("absolute", False))
    echo = {"loop1": [v.tolist() for v in loops[0]], "loop2": [v.tolist() for v in loops[1]], "h": hs,
            "absolute": absolute, **_echo_opts(opts)}
    res = run.timed("commutator", lambda: commutator_family_experiment(model, p, loops[0], loops[1], hs, y,
                                                                       opts, absolute))
    rec = res.to_record()
    rec["csv"] = run.csv("commutator", res.table)
    run.flags += [f"commutator: {w}" for w in res.warnings]
    return echo, rec


def cmd_holonomy(run: Run):
    model = _load_model(run)
    n = model.dim
    block = _table(run.cfg, "holonomy")
    _check_keys(block, HOLONOMY_KEYS, "[holonomy]")
    p = _point(block.get("point", [0.0] * n), n, "holonomy.point")
    samples = _positive_int(block.get("samples", 8), "holonomy.samples")
    y = indicatrix_sample(model, p, samples, run.seed)
    echo = {"point": p.tolist(), "samples": samples}
    results = {"y": y.tolist()}
    for key in ("loops", "triangles", "translates"):
        specs = block.get(key, [])
        if not isinstance(specs, list) or not all(isinstance(s, dict) for s in specs):
            raise ConfigError(f"holonomy.{key} must be an array of tables")
    if block.get("loops"):
        echo["loops"], results["loops"] = run.timed("loops", lambda: _loops(run, model, p, y, block["loops"]))
    if block.get("triangles"):
        echo["triangles"], results["triangles"] = run.timed("triangles",
                                                            lambda: _triangles(run, model, block["triangles"]))
    if block.get("translates"):
        echo["translates"], results["translates"] = run.timed(
            "translates", lambda: _translates(run, model, p, y, block["translates"]))
    if "algebra" in block:
        echo["algebra"], results["holonomy_algebra"] = _hol_algebra(run, model, p, _table(block, "algebra"))
    if "commutator" in block:
        echo["commutator"], results["commutator"] = _commutator(run, model, p, y, _table(block, "commutator"))
    return echo, results


HANDLERS = {"inspect": cmd_inspect, "algebra": cmd_algebra, "holonomy": cmd_holonomy, "transport": cmd_transport}


# -- report ----------------------------------------------------------------------------------

def _clean(obj):
    """Plain JSON types; numpy scalars and arrays become floats and lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps_report(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"


def loads_report(text: str) -> dict:
    rep = json.loads(text)
    if rep.get("schema") != SCHEMA:
        raise ConfigError("not a finsler-holonomy report")
    if rep.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported report schema_version {rep.get('schema_version')!r}")
    return rep


def strip_timings(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timings"}


def run_command(command: str, cfg: dict, seed: int | None = None, threads: int = 1, out: str | None = None):
    """Run one subcommand; returns (report dict, exit code).  Never raises
    for engine errors: they become an ``error`` member and an exit code."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = dict(cfg)
    if seed is None:
        seed = cfg.get("seed", DEFAULT_SEED)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        seed = -1
    run = Run(cfg, seed, threads, out)
    t0 = time.perf_counter()
    report = {
        "schema": SCHEMA,
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "finsler_holonomy", "version": __version__},
        "command": command,
        "config": {"seed": seed, "threads": threads},
        "status": "ok",
        "exit_code": 0,
        "results": {},
        "flags": [],
        "files": [],
        "error": None,
    }
    try:
        if seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        unknown = set(cfg) - {"seed", "model", command}
        if unknown:
            raise ConfigError(f"unknown top-level key(s) for {command}: {sorted(unknown)}")
        echo, results = HANDLERS[command](run)
        report["config"][command] = echo
        report["results"] = results
    except FinslerError as exc:
        report["status"] = "error"
        report["exit_code"] = exc.exit_code
        report["error"] = {"type": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, DegenerateMetricError):
            x, y = exc.point if exc.point is not None else (None, None)
            report["error"]["diagnostics"] = {"min_eigenvalue": exc.min_eigenvalue, "x": x, "y": y}
    report["config"]["model"] = run.model_echo
    report["flags"] = run.flags
    report["files"] = run.files
    run.timings["total"] = round(time.perf_counter() - t0, 6)
    report["timings"] = run.timings
    return _clean(report), report["exit_code"]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="finsler-holonomy",
                                 description="Curvature and holonomy algebras of Finsler manifolds.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "inspect": "validate a model and print g, G and R at points",
        "algebra": "curvature algebra and infinitesimal holonomy algebra at a point",
        "holonomy": "loop, triangle, translate, holonomy-algebra and commutator experiments",
        "transport": "parallel transport along configured curves",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", required=True, help="TOML experiment config")
        sp.add_argument("--out", help="JSON report path (default: stdout)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for independent blocks")
        sp.add_argument("--verbose", action="store_true", help="log progress to stderr")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return ConfigError.exit_code
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    log.info("running %s on %s", args.command, args.config)
    report, code = run_command(args.command, cfg, args.seed, args.threads, args.out)
    text = dumps_report(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    for f in report["flags"]:
        log.info("flag: %s", f)
    if report["error"]:
        print(f"error: {report['error']['message']}", file=sys.stderr)
    log.info("done in %.2fs, exit %d", report["timings"]["total"], code)
    return code


if __name__ == "__main__":
    sys.exit(main())
