"""Nonlinear parallel transport, Berwald translates and loop experiments.

Parallel translation along x(t) solves

    dy^i/dt = -G^i_j(x(t), y) x'^j

and the Berwald translate of a vertical field carries, alongside y, a vector
xi with

    dxi^i/dt = -G^i_jk(x(t), y) x'^j xi^k.

Everything is integrated with an adaptive Dormand-Prince 5(4) pair
(``scipy.integrate.RK45``) that is stepped manually so step counts, step-size
underflow and the step budget are under our control.  States are batched over
curves ``C`` that share one piece structure and over samples ``S``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45, solve_ivp

from .algebra import (
    AlgebraOptions,
    FieldBasis,
    LogEntry,
    RankGate,
    generate_infinitesimal_holonomy,
    numerical_rank,
)
from .errors import ChartError, ConfigError, IntegrationError
from .expressions import parse
from .fields import IndicatrixField, LieBracket, vector_field
from .geometry import berwald_coefficients, nonlinear_connection, spray_coeffs
from .models import FinslerModel, indicatrix_sample
from . import jets


@dataclass
class TransportOptions:
    rtol: float = 1e-10
    atol: float = 1e-13
    max_steps: int = 100_000
    max_step: float = math.inf  # on the unit parameter interval of each piece
    chart_radius: float | None = None
    check_drift: bool = True
    project_corners: bool = False  # rescale y onto its initial F level between pieces

    @classmethod
    def from_dict(cls, d: dict | None) -> "TransportOptions":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown transport option(s): {sorted(unknown)}")
        opts = cls(**d)
        opts.validate()
        return opts

    def validate(self):
        if not (0 < self.rtol < 1) or self.atol <= 0:
            raise ConfigError("rtol must lie in (0, 1) and atol must be positive")
        if not isinstance(self.max_steps, int) or self.max_steps < 1:
            raise ConfigError("max_steps must be a positive integer")
        if self.max_step <= 0:
            raise ConfigError("max_step must be positive")


def _opts(opts) -> TransportOptions:
    if isinstance(opts, TransportOptions):
        opts.validate()
        return opts
    return TransportOptions.from_dict(opts)


# -- curves ---------------------------------------------------------------------

class _Piece:
    """One smooth piece over t in [0, 1], batched over C curves."""

    state_dim = 0

    def start_state(self):
        return np.zeros((self.C, 0))

    def position(self, t, xs):  # -> (x, x') each (C, n)
        raise NotImplementedError  # pragma: no cover

    def state_rate(self, t, xs):
        return np.zeros_like(xs)


class _Linear(_Piece):
    def __init__(self, a, b):
        self.a = np.atleast_2d(np.asarray(a, float))
        self.d = np.atleast_2d(np.asarray(b, float)) - self.a
        self.C = len(self.a)

    def position(self, t, xs):
        return self.a + t * self.d, self.d


class _Parametric(_Piece):
    """x(t) from expressions in t over [t0, t1], rescaled to [0, 1]."""

    def __init__(self, exprs, t0, t1):
        self.exprs = exprs
        self.t0, self.t1 = float(t0), float(t1)
        self.C = 1

    def position(self, t, xs):
        span = self.t1 - self.t0
        space = jets.jet_space(((1, 1),))
        tj = jets.variable(space, 0, self.t0 + span * t)
        vals = []
        for e in self.exprs:
            v = e({"t": tj})
            vals.append((v.coeffs[0], v.coeffs[1] * span) if isinstance(v, jets.Jet) else (float(v), 0.0))
        x = np.array([[v[0] for v in vals]], dtype=float)
        dx = np.array([[v[1] for v in vals]], dtype=float)
        return x, dx


class _Geodesic(_Piece):
    """Geodesic with initial point and velocity; x, x' are integrated."""

    def __init__(self, model, x0, v0):
        self.model = model
        self.x0 = np.atleast_2d(np.asarray(x0, float))
        self.v0 = np.atleast_2d(np.asarray(v0, float))
        self.C = len(self.x0)
        self.state_dim = 2 * model.dim

    def start_state(self):
        return np.concatenate([self.x0, self.v0], axis=1)

    def position(self, t, xs):
        n = self.model.dim
        return xs[:, :n], xs[:, n:]

    def state_rate(self, t, xs):
        n = self.model.dim
        x, v = xs[:, :n], xs[:, n:]
        return np.concatenate([v, -2.0 * spray_coeffs(self.model, x, v)], axis=1)


@dataclass
class CurveSpec:
    """Piecewise-smooth curve in the chart, parameterised piece by piece.

    Use the constructors ``segment``, ``polyline``, ``parallelogram``,
    ``geodesic_triangle`` and ``parametric``.
    """

    kind: str
    params: dict
    pieces: list = field(repr=False)

    @property
    def start(self) -> np.ndarray:
        return np.asarray(self.params["start"], float)

    @property
    def end(self) -> np.ndarray:
        return np.asarray(self.params["end"], float)

    def reversed(self) -> "CurveSpec":
        if self.kind == "parametric":
            p = dict(self.params)
            return parametric(p["components"], p["t1"], p["t0"])
        if self.kind == "geodesic_triangle":
            raise ConfigError("reversal of geodesic triangles is not supported; build the reversed triangle")
        verts = np.asarray(self.params["vertices"], float)[::-1]
        return polyline(verts)

    def vertices(self):
        return np.asarray(self.params.get("vertices", [self.start, self.end]), float)

    def to_record(self) -> dict:
        out = {"kind": self.kind}
        for k, v in self.params.items():
            out[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
        return out


def segment(a, b) -> CurveSpec:
    return polyline([a, b], kind="segment")


def polyline(points, kind: str = "polyline") -> CurveSpec:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) < 2:
        raise ConfigError("a polyline needs at least two points")
    pieces = [_Linear(pts[k], pts[k + 1]) for k in range(len(pts) - 1)]
    return CurveSpec(kind, {"vertices": pts, "start": pts[0], "end": pts[-1]}, pieces)


def parallelogram_vertices(p, X, Y, s, t) -> np.ndarray:
    p, X, Y = (np.asarray(v, float) for v in (p, X, Y))
    return np.array([p, p + s * X, p + s * X + t * Y, p + t * Y, p])


def parallelogram(p, X, Y, s, t) -> CurveSpec:
    """Loop through p, p + sX, p + sX + tY, p + tY, p."""
    c = polyline(parallelogram_vertices(p, X, Y, s, t), kind="parallelogram")
    c.params.update({"p": np.asarray(p, float), "X": np.asarray(X, float), "Y": np.asarray(Y, float),
                     "s": float(s), "t": float(t)})
    return c


def parametric(components, t0: float = 0.0, t1: float = 1.0) -> CurveSpec:
    """Curve x(t) = (expr_1(t), ..., expr_n(t)) for t from t0 to t1."""
    exprs = [parse(c, ["t"]) for c in components]
    piece = _Parametric(exprs, t0, t1)
    x0, _ = piece.position(0.0, None)
    x1, _ = piece.position(1.0, None)
    return CurveSpec("parametric", {"components": list(components), "t0": float(t0), "t1": float(t1),
                                    "start": x0[0], "end": x1[0]}, [piece])


def shoot_geodesic(model: FinslerModel, a, b, rtol: float = 1e-12, max_iter: int = 30) -> np.ndarray:
    """Initial velocity v with exp_a(v) = b on the unit interval (shooting).

    Newton iteration; the endpoint map and its forward-difference Jacobian
    come from one batched DOP853 integration of n + 1 geodesics, first at a
    loose tolerance, then at ``rtol``.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n = model.dim

    def endpoint_and_jacobian(v, tol):
        delta = 1e-7 * max(1.0, float(np.max(np.abs(v))))
        vs = np.vstack([v, v + delta * np.eye(n)])
        piece = _Geodesic(model, np.broadcast_to(a, vs.shape), vs)
        z0 = piece.start_state()
        sol = solve_ivp(lambda t, w: piece.state_rate(t, w.reshape(z0.shape)).ravel(), (0.0, 1.0), z0.ravel(),
                        method="DOP853", rtol=tol, atol=1e-3 * tol)
        if sol.status != 0:
            raise IntegrationError(f"geodesic integration failed: {sol.message}")
        ends = sol.y[:, -1].reshape(z0.shape)[:, :n]
        return ends[0] - b, ((ends[1:] - ends[0]) / delta).T

    v = b - a
    for tol, target in ((1e-8, 1e-6), (rtol, 1e3 * rtol)):
        for _ in range(max_iter):
            miss, jac = endpoint_and_jacobian(v, tol)
            if np.max(np.abs(miss)) <= target:
                break
            v = v - np.linalg.solve(jac, miss)
        else:
            raise IntegrationError(f"geodesic shooting from {a.tolist()} to {b.tolist()} did not converge "
                                   f"(miss {np.max(np.abs(miss)):.2e})")
    return v


def geodesic_triangle(model: FinslerModel, vertices, rtol: float = 1e-12) -> CurveSpec:
    """Closed geodesic triangle v0 -> v1 -> v2 -> v0 (edges by shooting)."""
    v = np.asarray(vertices, float)
    if v.shape != (3, model.dim):
        raise ConfigError(f"geodesic_triangle needs three {model.dim}-dimensional vertices")
    pieces = []
    velocities = []
    for k in range(3):
        a, b = v[k], v[(k + 1) % 3]
        vel = shoot_geodesic(model, a, b, rtol)
        velocities.append(vel)
        pieces.append(_Geodesic(model, a, vel))
    return CurveSpec("geodesic_triangle", {"vertices": v, "start": v[0], "end": v[0],
                                           "initial_velocities": np.array(velocities)}, pieces)


def curve_from_config(spec: dict, model: FinslerModel) -> CurveSpec:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("curve spec must be a table with a 'kind'")
    kind = spec["kind"]
    try:
        if kind == "segment":
            return segment(spec["start"], spec["end"])
        if kind == "polyline":
            return polyline(spec["points"])
        if kind == "parallelogram":
            n = model.dim
            return parallelogram(spec["p"], vector_field(spec["X"], n).constant_value(),
                                 vector_field(spec["Y"], n).constant_value(), spec["s"], spec["t"])
        if kind == "geodesic_triangle":
            return geodesic_triangle(model, spec["vertices"])
        if kind == "parametric":
            return parametric(spec["components"], spec.get("t0", 0.0), spec.get("t1", 1.0))
    except KeyError as exc:
        raise ConfigError(f"curve of kind {kind!r} is missing {exc.args[0]!r}") from None
    raise ConfigError(f"unknown curve kind {kind!r}")


# -- integrator -------------------------------------------------------------------

def _integrate(rhs, z0, rtol, atol, max_steps, max_step, t0=0.0, t1=1.0):
    """Adaptive RK45 from t0 to t1; returns (z1, steps)."""
    z0 = np.asarray(z0, dtype=float)
    if z0.size == 0 or t1 == t0:
        return z0.copy(), 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # scipy clamps rtol below 100 eps
        solver = RK45(rhs, t0, z0, t1, rtol=rtol, atol=atol, max_step=max_step)
    steps = 0
    while solver.status == "running":
        msg = solver.step()
        steps += 1
        if solver.status == "failed":
            raise IntegrationError(f"integrator failed at t={solver.t:.6g}: {msg or 'step size underflow'}")
        if steps > max_steps:
            raise IntegrationError(f"step budget exhausted ({max_steps} steps) at t={solver.t:.6g}")
        if not np.all(np.isfinite(solver.y)):
            raise IntegrationError(f"non-finite state at t={solver.t:.6g}")
    return solver.y.copy(), steps


def _check_chart(x, radius):
    if radius is not None and np.any(np.linalg.norm(x, axis=-1) > radius):
        raise ChartError(f"curve leaves the chart region |x| <= {radius}")


def _transport_pieces(model, pieces, y0, opts: TransportOptions, xi0=None):
    """Integrate along the pieces.  ``y0`` is (C, S, n); ``xi0`` optional
    (C, S, n) carried vectors.  Returns (y, xi, steps)."""
    n = model.dim
    y = np.array(y0, dtype=float)
    C, S, _ = y.shape
    xi = None if xi0 is None else np.array(xi0, dtype=float)
    total = 0
    f0 = None
    for k, piece in enumerate(pieces):
        if piece.C not in (1, C):
            raise ConfigError("curve batch does not match the sample batch")
        xs0 = piece.start_state()
        if piece.C == 1 and C > 1:
            xs0 = np.repeat(xs0, C, axis=0)
        m = xs0.shape[1]
        ny = C * S * n

        def unpack(z):
            xs = z[: C * m].reshape(C, m)
            yy = z[C * m: C * m + ny].reshape(C, S, n)
            vv = z[C * m + ny:].reshape(C, S, n) if xi is not None else None
            return xs, yy, vv

        def rhs(t, z):
            xs, yy, vv = unpack(z)
            x, dx = piece.position(t, xs)
            x = np.broadcast_to(x, (C, n))
            dx = np.broadcast_to(dx, (C, n))
            _check_chart(x, opts.chart_radius)
            xb = np.broadcast_to(x[:, None, :], (C, S, n))
            parts = [piece.state_rate(t, xs).ravel()] if m else []
            if vv is None:
                Gj = nonlinear_connection(model, xb, yy)
                parts.append(-np.einsum("csij,cj->csi", Gj, dx).ravel())
            else:
                Gj, Gjk = berwald_coefficients(model, xb, yy)
                parts.append(-np.einsum("csij,cj->csi", Gj, dx).ravel())
                parts.append(-np.einsum("csijk,cj,csk->csi", Gjk, dx, vv).ravel())
            return np.concatenate(parts)

        z0 = np.concatenate([xs0.ravel(), y.ravel()] + ([xi.ravel()] if xi is not None else []))
        z1, steps = _integrate(rhs, z0, opts.rtol, opts.atol, opts.max_steps, opts.max_step)
        total += steps
        xs1, y, vv = unpack(z1)
        y = y.copy()
        xi = None if vv is None else vv.copy()
        if opts.project_corners:
            xa = np.broadcast_to(piece.position(0.0, xs0)[0], (C, n))[:, None, :]
            xb = np.broadcast_to(piece.position(1.0, xs1)[0], (C, n))[:, None, :]
            if f0 is None:
                f0 = model.F(xa, np.array(y0, dtype=float))
            if k < len(pieces) - 1:
                y *= (f0 / model.F(xb, y))[..., None]
    return y, xi, total


def _curve_points(curve: CurveSpec):
    """Start and end points as (C, n) arrays."""
    if curve.kind == "parametric":
        return curve.start[None], curve.end[None]
    p0 = curve.pieces[0]
    start = p0.a if isinstance(p0, _Linear) else p0.x0
    last = curve.pieces[-1]
    end = (last.a + last.d) if isinstance(last, _Linear) else np.atleast_2d(curve.end)
    return start, end


@dataclass
class TransportResult:
    y_start: np.ndarray
    y_end: np.ndarray
    F_start: np.ndarray
    F_end: np.ndarray
    F_drift: float
    steps: int
    tolerance: float  # acceptance bound on the F drift (10 rtol)

    def to_record(self) -> dict:
        return {"y_end": self.y_end.tolist(), "F_drift": self.F_drift, "steps": self.steps,
                "tolerance": self.tolerance}


def _finish(model, x0, x1, y0, y1, steps, opts, check=True) -> TransportResult:
    f0 = model.F(x0, y0)
    f1 = model.F(x1, y1)
    drift = float(np.max(np.abs(f1 - f0))) if f0.size else 0.0
    rel = float(np.max(np.abs(f1 - f0) / f0)) if f0.size else 0.0
    bound = 10.0 * opts.rtol
    if check and opts.check_drift and rel > bound:
        raise IntegrationError(f"F drift {rel:.3e} exceeds 10*rtol = {bound:.1e}; transport rejected")
    return TransportResult(y0, y1, f0, f1, drift, steps, bound)


def parallel_transport(model: FinslerModel, curve: CurveSpec, y0, opts=None) -> TransportResult:
    """Parallel translate the vectors ``y0`` ((n,) or (S, n)) along ``curve``."""
    opts = _opts(opts)
    y0 = np.asarray(y0, dtype=float)
    single = y0.ndim == 1
    ys = np.atleast_2d(y0)
    xa, xb = _curve_points(curve)
    _check_chart(curve.vertices(), opts.chart_radius)
    if np.any(model.F(xa[0], ys) <= 0):
        raise ConfigError("parallel_transport needs F(c(0), y0) > 0")
    y1, _, steps = _transport_pieces(model, curve.pieces, ys[None], opts)
    res = _finish(model, xa[0], xb[0], ys, y1[0], steps, opts)
    if single:
        res.y_start, res.y_end, res.F_start, res.F_end = ys[0], res.y_end[0], res.F_start[0], res.F_end[0]
    return res


def transport_many(model: FinslerModel, vertices, y0, opts=None):
    """Transport samples ``y0`` (S, n) along C polylines with common vertex
    count (``vertices`` is (C, K, n)); returns (y_end (C, S, n), steps)."""
    opts = _opts(opts)
    v = np.asarray(vertices, float)
    _check_chart(v, opts.chart_radius)
    pieces = [_Linear(v[:, k], v[:, k + 1]) for k in range(v.shape[1] - 1)]
    ys = np.atleast_2d(np.asarray(y0, float))
    C = v.shape[0]
    y1, _, steps = _transport_pieces(model, pieces, np.broadcast_to(ys, (C,) + ys.shape), opts)
    for c in range(C):
        _finish(model, v[c, 0], v[c, -1], ys, y1[c], steps, opts)
    return y1, steps


def loop_transport(model: FinslerModel, p, X, Y, s, t, y0, opts=None) -> TransportResult:
    """Parallel translation around the parallelogram Pi(sX, tY) at p."""
    return parallel_transport(model, parallelogram(p, X, Y, s, t), y0, opts)


# -- loops and curvature -----------------------------------------------------------

@dataclass
class ConvergenceTable:
    rows: list  # dicts with h, max_err, ratio, order

    def to_record(self):
        return [dict(r) for r in self.rows]

    @property
    def orders(self):
        return [r["order"] for r in self.rows if r["order"] is not None]

    @property
    def ratios(self):
        return [r["ratio"] for r in self.rows if r["ratio"] is not None]


def _table(hs, errs) -> ConvergenceTable:
    rows = []
    for k, (h, e) in enumerate(zip(hs, errs)):
        ratio = order = None
        if k > 0 and e > 0 and errs[k - 1] > 0:
            ratio = errs[k - 1] / e
            order = math.log(ratio) / math.log(hs[k - 1] / h)
        rows.append({"h": float(h), "max_err": float(e), "ratio": ratio, "order": order})
    return ConvergenceTable(rows)


def write_convergence_csv(path, table: ConvergenceTable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h", "max_err", "ratio"])
        for r in table.rows:
            w.writerow([repr(r["h"]), repr(r["max_err"]), "" if r["ratio"] is None else repr(r["ratio"])])


@dataclass
class LoopCurvatureResult:
    y: np.ndarray
    field_values: np.ndarray
    estimates: dict  # h -> (S, n) mixed differences
    table: ConvergenceTable
    warnings: list

    def to_record(self):
        return {"table": self.table.to_record(), "warnings": list(self.warnings),
                "samples": int(len(self.y))}


def recommended_rtol(h: float, power: int) -> float:
    return 1e-3 * h**power


def curvature_from_loops(model: FinslerModel, p, X, Y, hs, y_samples, opts=None) -> LoopCurvatureResult:
    """Central mixed difference of loop transports over (s, t) = (+-h, +-h),
    compared with r(X, Y)(y)."""
    from .fields import curvature_field

    opts = _opts(opts or {"rtol": 1e-13, "atol": 1e-15})
    p = np.asarray(p, float)
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    y = np.atleast_2d(np.asarray(y_samples, float))
    xi = curvature_field(model, X, Y).evaluate(p, y)
    scale = max(float(np.max(np.abs(xi))), 1e-300)
    notes = []
    est = {}
    errs = []
    for h in hs:
        if opts.rtol > 1e-2 * h**4:
            notes.append(f"differencing noise dominates at h={h:g}: rtol {opts.rtol:.1e} not << h^4; "
                         f"recommended rtol {recommended_rtol(h, 4):.1e}")
        signs = [(1, 1), (1, -1), (-1, 1), (-1, -1)]
        verts = np.stack([parallelogram_vertices(p, X, Y, a * h, b * h) for a, b in signs])
        ys, _ = transport_many(model, verts, y, opts)
        d = (ys[0] - ys[1] - ys[2] + ys[3]) / (4 * h * h)
        est[float(h)] = d
        errs.append(float(np.max(np.abs(d - xi))) / (scale if np.max(np.abs(xi)) > 0 else 1.0))
    return LoopCurvatureResult(y, xi, est, _table(list(map(float, hs)), errs), notes)


# -- holonomy angle ------------------------------------------------------------------

def holonomy_angle(model: FinslerModel, curve: CurveSpec, y0, opts=None) -> float:
    """Signed angle from y0 to its translate around a closed curve, measured
    in the fundamental tensor at the base point (dim 2)."""
    from .models import fundamental_tensor

    if model.dim != 2:
        raise ConfigError("holonomy_angle is defined for surfaces")
    res = parallel_transport(model, curve, y0, opts)
    x0 = curve.start
    g = fundamental_tensor(model, x0, np.asarray(y0, float)).g
    a, b = np.asarray(y0, float), res.y_end
    # positively oriented g-orthonormal frame starting at y0
    e1 = a / math.sqrt(a @ g @ a)
    w = np.array([-e1[1], e1[0]])
    w = w - (w @ g @ e1) * e1
    e2 = w / math.sqrt(w @ g @ w)
    return math.atan2(b @ g @ e2, b @ g @ e1)


# -- Berwald translate ------------------------------------------------------------------

@dataclass
class TranslateResult:
    y: np.ndarray  # sample points at the end of the curve
    values: np.ndarray  # translated field at those points
    y_source: np.ndarray  # matching points at the start of the curve
    steps: int


def berwald_translate(model: FinslerModel, curve: CurveSpec, xi, y_source, opts=None) -> TranslateResult:
    """Carry xi from the start q of ``curve`` to its end p.

    ``xi`` is an IndicatrixField (evaluated at q) or an array of its values at
    ``y_source``; returns (tau(y_source), tau_* xi(y_source)).
    """
    opts = _opts(opts)
    ys = np.atleast_2d(np.asarray(y_source, float))
    xa, xb = _curve_points(curve)
    _check_chart(curve.vertices(), opts.chart_radius)
    v0 = xi.evaluate(xa[0], ys) if isinstance(xi, IndicatrixField) else np.asarray(xi, float).reshape(ys.shape)
    y1, v1, steps = _transport_pieces(model, curve.pieces, ys[None], opts, xi0=v0[None])
    _finish(model, xa[0], xb[0], ys, y1[0], steps, opts)
    return TranslateResult(y1[0], v1[0], ys, steps)


def berwald_translate_at(model: FinslerModel, curve: CurveSpec, xi, y_target, opts=None) -> np.ndarray:
    """Values of the Berwald translate B_curve xi at given points of the
    indicatrix at the end of the curve (points are pulled back first)."""
    opts = _opts(opts)
    yt = np.atleast_2d(np.asarray(y_target, float))
    back = parallel_transport(model, curve.reversed(), yt, opts).y_end
    res = berwald_translate(model, curve, xi, back, opts)
    return res.values


def covariant_derivative_by_translate(model: FinslerModel, xi, X, p, y, h: float, opts=None,
                                      order: int = 2) -> np.ndarray:
    """Central difference in s of B_{p+sX -> p} xi at points y of I_p; ``order``
    2 uses s = +-h, order 4 adds s = +-2h."""
    p = np.asarray(p, float)
    X = np.asarray(X, float)
    stencils = {2: {1: 0.5, -1: -0.5}, 4: {2: -1 / 12, 1: 8 / 12, -1: -8 / 12, -2: 1 / 12}}
    if order not in stencils:
        raise ConfigError("order must be 2 or 4")
    out = 0.0
    for k, w in stencils[order].items():
        out = out + w * berwald_translate_at(model, segment(p + k * h * X, p), xi, y, opts)
    return out / h


# -- flow commutator -------------------------------------------------------------------

def _flow(rhs, z, T, steps):
    """Time-T flow by classical RK4 with a fixed step count.  Fixed steps keep
    the result a smooth function of T, which mixed differences rely on."""
    if T == 0:
        return z
    dt = T / steps
    for _ in range(steps):
        k1 = rhs(z)
        k2 = rhs(z + 0.5 * dt * k1)
        k3 = rhs(z + 0.5 * dt * k2)
        k4 = rhs(z + dt * k3)
        z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return z


def covariant_derivative_by_flows(model: FinslerModel, xi: IndicatrixField, X, p, y, h: float,
                                  flow_steps: int = 4) -> np.ndarray:
    """nabla_X xi from the flows of X^h and xi: the central mixed difference
    over (s, t) = (+-h, +-h) of phi^xi_{-t} phi^{X^h}_{-s} phi^xi_t phi^{X^h}_s,
    divided by 4 h^2 (y part)."""
    n = model.dim
    Xf = vector_field(X, n)
    y = np.atleast_2d(np.asarray(y, float))
    S = len(y)
    z0 = np.concatenate([np.broadcast_to(np.asarray(p, float), (S, n)), y], axis=1)

    def hor(z):
        x, yy = z[:, :n], z[:, n:]
        Xv = Xf.at(x)
        Gj = nonlinear_connection(model, x, yy)
        return np.concatenate([Xv, -np.einsum("bkj,bj->bk", Gj, Xv)], axis=1)

    def ver(z):
        x, yy = z[:, :n], z[:, n:]
        return np.concatenate([np.zeros_like(x), xi.evaluate(x, yy)], axis=1)

    out = np.zeros((S, n))
    for a, b in [(1, 1), (1, -1), (-1, 1), (-1, -1)]:
        s, t = a * h, b * h
        z = _flow(hor, z0, s, flow_steps)
        z = _flow(ver, z, t, flow_steps)
        z = _flow(hor, z, -s, flow_steps)
        z = _flow(ver, z, -t, flow_steps)
        out += a * b * z[:, n:]
    return out / (4 * h * h)


# -- commutator-like families -----------------------------------------------------------------

@dataclass
class CommutatorResult:
    table: ConvergenceTable
    reference: np.ndarray  # -[xi, eta] at the samples
    estimates: dict
    warnings: list
    steps: int

    def to_record(self):
        return {"table": self.table.to_record(), "warnings": list(self.warnings), "steps": self.steps,
                "reference_max": float(np.max(np.abs(self.reference))) if self.reference.size else 0.0}


def commutator_loop_vertices(p, loop1, loop2, s1, t1, s2, t2) -> np.ndarray:
    """Pi2, Pi1, Pi2 reversed, Pi1 reversed as one 17-vertex polyline, so the
    total map is Phi^-1 Psi^-1 Phi Psi (Psi = loop 2 applied first)."""
    (X1, Y1), (X2, Y2) = loop1, loop2
    a = parallelogram_vertices(p, X2, Y2, s2, t2)
    b = parallelogram_vertices(p, X1, Y1, s1, t1)
    return np.concatenate([a, b[1:], a[::-1][1:], b[::-1][1:]])


def commutator_family_experiment(model: FinslerModel, p, loop1, loop2, hs, y_samples, opts=None,
                                 absolute: bool = False) -> CommutatorResult:
    """4th mixed central difference of the commutator of two parallelogram
    loop families, compared with -[xi, eta] for xi = r(X1, Y1), eta = r(X2, Y2).

    Errors are relative to max |[xi, eta]| unless ``absolute`` (or the bracket
    vanishes)."""
    from .fields import curvature_field

    opts = _opts(opts or {"rtol": 1e-12, "atol": 1e-15})
    p = np.asarray(p, float)
    loop1 = tuple(np.asarray(v, float) for v in loop1)
    loop2 = tuple(np.asarray(v, float) for v in loop2)
    y = np.atleast_2d(np.asarray(y_samples, float))
    xi = curvature_field(model, *loop1)
    eta = curvature_field(model, *loop2)
    ref = -LieBracket(xi, eta).evaluate(p, y)
    scale = float(np.max(np.abs(ref)))
    rel = not absolute and scale > 1e-12
    signs = [np.array(sg) for sg in np.ndindex(2, 2, 2, 2)]
    notes = []
    est = {}
    errs = []
    steps = 0
    for h in hs:
        if opts.rtol > 1e-2 * h**4:
            notes.append(f"differencing noise dominates at h={h:g}: rtol {opts.rtol:.1e} not << h^4; "
                         f"recommended rtol {recommended_rtol(h, 4):.1e}")
        combos = [1 - 2 * sg for sg in signs]  # entries +-1
        verts = np.stack([commutator_loop_vertices(p, loop1, loop2, *(h * c)) for c in combos])
        ys, st = transport_many(model, verts, y, opts)
        steps += st
        weights = np.array([np.prod(c) for c in combos], float)
        d = np.einsum("c,csi->si", weights, ys) / (16 * h**4)
        est[float(h)] = d
        err = float(np.max(np.abs(d - ref)))
        errs.append(err / scale if rel else err)
    return CommutatorResult(_table(list(map(float, hs)), errs), ref, est, notes, steps)


# -- holonomy algebra ---------------------------------------------------------------------------

@dataclass
class HybridField:
    """Field known by values and y-Jacobian on a fixed sample set."""

    provenance: str
    values: np.ndarray  # (S, n)
    jacobian: np.ndarray | None  # (S, n, n) d value^i / d y^k
    jacobian_error: float = 0.0


def _stencil_jacobian(fn, y, h):
    """5-point central y-derivatives of fn: (S, n) -> (S, n) as (S, n, n)."""
    S, n = y.shape
    pts = []
    offsets = (-2, -1, 1, 2)
    for k in range(n):
        for o in offsets:
            q = y.copy()
            q[:, k] += o * h
            pts.append(q)
    vals = fn(np.concatenate(pts)).reshape(n, len(offsets), S, n)
    w = np.array([1.0, -8.0, 8.0, -1.0]) / (12 * h)
    return np.einsum("o,kosi->sik", w, vals)


@dataclass
class HolonomyOptions:
    stencil_h: float = 1e-2
    hybrid_tol: float = 1e-6
    hybrid_bracket_depth: int = 1

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown holonomy option(s): {sorted(unknown)}")
        o = cls(**d)
        if o.stencil_h <= 0 or not (0 < o.hybrid_tol < 1) or o.hybrid_bracket_depth not in (0, 1):
            raise ConfigError("stencil_h > 0, 0 < hybrid_tol < 1 and hybrid_bracket_depth in {0, 1} required")
        return o


def holonomy_algebra_at(model: FinslerModel, p, sources, alg_opts=None, transport_opts=None,
                        hol_opts=None) -> FieldBasis:
    """Lower bound for the holonomy algebra at p.

    ``sources`` is a list of curves, each ending at p; the infinitesimal
    holonomy algebra at each curve's start is Berwald-translated to p, merged
    with the one at p and closed under brackets on the sampled data.
    """
    aopts = alg_opts if isinstance(alg_opts, AlgebraOptions) else AlgebraOptions.from_dict(alg_opts)
    topts = _opts(transport_opts)
    hopts = hol_opts if isinstance(hol_opts, HolonomyOptions) else HolonomyOptions.from_dict(hol_opts)
    p = np.asarray(p, float)
    base = generate_infinitesimal_holonomy(model, p, aopts)
    y = base.sample_set
    n = model.dim
    from .fields import FieldContext

    ctx = FieldContext(model, p, y)
    if base.fields:
        ctx.reserve(base.fields, 0, 1)
    members = [HybridField(f.provenance, ctx.values(f), ctx.jacobian(f)) for f in base.fields]
    gate = RankGate(aopts.tol, aopts.zero_tol)
    log = list(base.generation_log)
    for m in members:
        gate.offer(m.values)
    flags = ["holonomy algebra lower bound, hol_p(M)"]
    native = len(members)
    curves = []
    for ci, curve in enumerate(sources):
        if not np.allclose(curve.end, p, atol=1e-12):
            raise ConfigError(f"source curve {ci} does not end at p")
        q = curve.start
        hq = generate_infinitesimal_holonomy(model, q, aopts)
        curves.append({"index": ci, "q": q.tolist(), "rank_q": hq.rank, "curve": curve.to_record()})
        for f in hq.fields:
            def translated(pts, f=f, curve=curve):
                return berwald_translate_at(model, curve, f, pts, topts)

            vals = translated(y)
            hm = HybridField(f"B[c{ci}]({f.provenance})", vals, None)
            accepted, norm = gate.offer(vals)
            entry = LogEntry(hm.provenance, "berwald_translate", [f.provenance, f"c{ci}"], 0, accepted, norm)
            if accepted:
                if hopts.hybrid_bracket_depth:
                    hm.jacobian = _stencil_jacobian(translated, y, hopts.stencil_h)
                    coarse = _stencil_jacobian(translated, y, 2 * hopts.stencil_h)
                    hm.jacobian_error = float(np.max(np.abs(hm.jacobian - coarse))) / 15.0
                entry.index = len(members)
                members.append(hm)
            log.append(entry)
            if len(members) >= aopts.max_fields:
                break
    truncated = len(members) >= aopts.max_fields
    # brackets on sampled data; native pairs are already closed in `base`
    if hopts.hybrid_bracket_depth and not truncated:
        hgate = RankGate(hopts.hybrid_tol, aopts.zero_tol, gate.scale)
        hgate.columns, hgate.rank = list(gate.columns), gate.rank
        count = len(members)
        for a in range(count):
            for b in range(max(a + 1, native), count):
                A, B = members[a], members[b]
                vals = np.einsum("sik,sk->si", B.jacobian, A.values) - np.einsum("sik,sk->si", A.jacobian, B.values)
                noise = A.jacobian_error * np.max(np.abs(B.values)) + B.jacobian_error * np.max(np.abs(A.values))
                prov = f"[{A.provenance}, {B.provenance}]"
                rms = float(np.linalg.norm(vals)) / math.sqrt(vals.size)
                if rms > 0 and noise / rms > hopts.hybrid_tol:
                    # too noisy to certify: skip rather than risk a spurious rank
                    flags.append(f"stencil noise {noise / rms:.1e} (relative) exceeds hybrid_tol for {prov}; skipped")
                    log.append(LogEntry(prov, "hybrid_bracket", [A.provenance, B.provenance], 1, False, rms))
                    continue
                accepted, norm = hgate.offer(vals)
                entry = LogEntry(prov, "hybrid_bracket", [A.provenance, B.provenance], 1, accepted, norm)
                if accepted:
                    entry.index = len(members)
                    members.append(HybridField(prov, vals, None))
                log.append(entry)
                if len(members) >= aopts.max_fields:
                    truncated = True
                    break
            if truncated:
                break
    m = np.column_stack([mm.values.ravel() for mm in members]) if members else np.zeros((y.size, 0))
    mn = m / np.linalg.norm(m, axis=0) if members else m
    rank, s = numerical_rank(mn, hopts.hybrid_tol if len(members) > native else aopts.tol)
    if rank < base.rank:
        raise IntegrationError(f"holonomy rank {rank} below infinitesimal rank {base.rank}")
    if truncated:
        flags.append("truncated, dimension is a lower bound only")
    if rank >= len(y) * (n - 1):
        flags.append(f"rank saturates sample capacity {len(y) * (n - 1)}; increase samples")
    return FieldBasis(
        kind="holonomy_algebra",
        fields=members,
        base_point=p,
        sample_set=y,
        eval_matrix=m,
        rank=rank,
        sv_spectrum=s,
        generation_log=log,
        closed=False,
        truncated=truncated,
        flags=flags + [f for f in base.flags if f not in flags],
        rank_doubled=None,
        options={"algebra": base.options, "stencil_h": hopts.stencil_h, "hybrid_tol": hopts.hybrid_tol,
                 "hybrid_bracket_depth": hopts.hybrid_bracket_depth, "sources": curves,
                 "infinitesimal_rank": base.rank},
    )
