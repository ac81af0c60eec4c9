"""Finsler functions on a single chart of R^n, fundamental tensor, indicatrix.

A model is a jet-differentiable map ``(x, y) -> F(x, y)``; ``x`` and ``y`` are
passed as sequences of scalars that may be floats, numpy arrays (sample
batches) or :class:`~finsler_holonomy.jets.Jet` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import jets
from .errors import ConfigError, DegenerateMetricError, JetDomainError
from .expressions import parse

FAMILIES = ("euclidean", "riemannian_diag", "sphere", "randers", "custom_polynomial")


@dataclass(frozen=True, eq=False)
class FinslerModel:
    dim: int
    name: str
    family: str
    params: dict
    finsler: Callable
    energy_fn: Callable | None = None
    metric_fn: Callable | None = field(default=None, repr=False)

    @property
    def is_riemannian(self) -> bool:
        return self.metric_fn is not None

    def energy(self, x: Sequence, y: Sequence):
        """F^2; Riemannian families evaluate the quadratic form directly."""
        if self.energy_fn is not None:
            return self.energy_fn(x, y)
        f = self.finsler(x, y)
        return f * f

    def riemannian_metric(self, x: Sequence):
        if self.metric_fn is None:
            raise ConfigError(f"model {self.name!r} is not Riemannian")
        return self.metric_fn(x)

    def F(self, x, y) -> np.ndarray:
        """Numeric Finsler function; ``x``, ``y`` have the coordinate axis last."""
        x, y = _broadcast_xy(x, y, self.dim)
        return np.asarray(self.finsler(list(np.moveaxis(x, -1, 0)), list(np.moveaxis(y, -1, 0))), dtype=float) \
            * np.ones(y.shape[:-1])


@dataclass(frozen=True)
class MetricEval:
    g: np.ndarray
    g_inv: np.ndarray
    point: tuple


def _broadcast_xy(x, y, n):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != n or y.shape[-1] != n:
        raise ConfigError(f"points must have {n} components (got x {x.shape}, y {y.shape})")
    shape = np.broadcast_shapes(x.shape, y.shape)
    return np.broadcast_to(x, shape), np.broadcast_to(y, shape)


# -- fundamental tensor ------------------------------------------------------

def fundamental_tensor(model: FinslerModel, x, y) -> MetricEval:
    """g_ij = 1/2 d^2(F^2)/dy^i dy^j by jets, inverse by direct solve.

    ``x``/``y`` may carry leading batch axes.
    """
    n = model.dim
    x, y = _broadcast_xy(x, y, n)
    batch = y.shape[:-1]
    if np.any(np.linalg.norm(y, axis=-1) == 0):
        raise DegenerateMetricError("fundamental tensor requested at y = 0", point=(x, y))
    space = jets.jet_space(((n, 2),))
    yj = jets.variables(space, y)
    e = model.energy(list(np.moveaxis(x, -1, 0)), [yj[..., i] for i in range(n)])
    g = np.empty(batch + (n, n))
    for i in range(n):
        for j in range(i, n):
            g[..., i, j] = g[..., j, i] = 0.5 * e.partial([i, j])
    _check_positive(g, x, y)
    return MetricEval(g=g, g_inv=np.linalg.inv(g), point=(x, y))


def _check_positive(g, x, y):
    if not np.all(np.isfinite(g)):
        raise DegenerateMetricError("degenerate metric: non-finite fundamental tensor", point=(x, y))
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(g)
        lo = float(eig.min())
        flat = eig.reshape(-1, eig.shape[-1]).min(axis=1)
        k = int(np.argmin(flat))
        xs = np.asarray(x).reshape(-1, x.shape[-1])[k]
        ys = np.asarray(y).reshape(-1, y.shape[-1])[k]
        raise DegenerateMetricError(
            f"degenerate metric at x={xs.tolist()}, y={ys.tolist()}: metric not positive definite "
            f"(smallest eigenvalue {lo:.3e})",
            min_eigenvalue=lo,
            point=(xs, ys),
        ) from None


# -- indicatrix ----------------------------------------------------------------

def unit_directions(n: int, count: int, seed: int) -> np.ndarray:
    """Seeded directions on the Euclidean unit sphere (equispaced with random
    phase on the circle)."""
    if count < 1:
        raise ConfigError("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    if n == 2:
        theta = 2 * np.pi * (np.arange(count) + rng.random()) / count
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    u = rng.standard_normal((count, n))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def project_to_indicatrix(model: FinslerModel, x, u) -> np.ndarray:
    """Rescale ``u`` to ``u / F(x, u)``."""
    u = np.asarray(u, dtype=float)
    f = model.F(x, u)
    if np.any(f <= 0) or not np.all(np.isfinite(f)):
        raise DegenerateMetricError(f"degenerate model: F(x,u) <= 0 (min {np.min(f):.3e})")
    return u / f[..., None]


def indicatrix_sample(model: FinslerModel, x, count: int, seed: int = 0) -> np.ndarray:
    """``count`` points y with F(x, y) = 1, reproducible for a given seed."""
    x = np.asarray(x, dtype=float)
    return project_to_indicatrix(model, x, unit_directions(model.dim, count, seed))


def check_model(model: FinslerModel, points, samples: int = 64, seed: int = 0, rtol: float = 1e-10) -> None:
    """Sampled validation: F > 0, positive 1-homogeneity, positive-definite g.

    Raises :class:`DegenerateMetricError` on the first violation.
    """
    n = model.dim
    u = unit_directions(n, samples, seed)
    for p in np.atleast_2d(np.asarray(points, dtype=float)):
        try:
            f = model.F(p, u)
            f2 = model.F(p, 2.0 * u)
        except JetDomainError as exc:
            raise DegenerateMetricError(f"degenerate model at x={p.tolist()}: {exc}") from None
        if np.any(f <= 0) or not np.all(np.isfinite(f)):
            raise DegenerateMetricError(f"degenerate model at x={p.tolist()}: F <= 0 on a nonzero vector")
        if np.max(np.abs(f2 - 2 * f) / f) > 1e3 * rtol:
            raise DegenerateMetricError(f"model at x={p.tolist()} is not positively 1-homogeneous")
        fundamental_tensor(model, p, u)


# -- builtin families ------------------------------------------------------------

def _names(n):
    return [f"x{i + 1}" for i in range(n)], [f"y{i + 1}" for i in range(n)]


def _env(x, y):
    env = {f"x{i + 1}": v for i, v in enumerate(x)}
    env.update({f"y{i + 1}": v for i, v in enumerate(y)})
    return env


def _quadratic(matrix, y):
    n = len(y)
    total = 0.0
    for i in range(n):
        for j in range(n):
            a = matrix[i][j]
            if isinstance(a, float) and a == 0.0:
                continue
            total = total + a * y[i] * y[j]
    return total


def _euclidean(n, params):
    def metric(x):
        return [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]

    def energy(x, y):
        return sum((yi * yi for yi in y[1:]), y[0] * y[0])

    return dict(finsler=lambda x, y: jets.sqrt(energy(x, y)), energy_fn=energy, metric_fn=metric)


def _riemannian_diag(n, params):
    diag = params.get("diag")
    if diag is None or len(diag) != n:
        raise ConfigError(f"riemannian_diag needs 'diag' with {n} coefficient expressions")
    xs, _ = _names(n)
    exprs = [parse(d, xs) for d in diag]

    def coeff(k, x):
        v = exprs[k](_env(x, ()))
        return v if isinstance(v, jets.Jet) or np.ndim(v) else float(v)

    def metric(x):
        return [[coeff(i, x) if i == j else 0.0 for j in range(n)] for i in range(n)]

    def energy(x, y):
        return sum((coeff(i, x) * y[i] * y[i] for i in range(1, n)), coeff(0, x) * y[0] * y[0])

    return dict(finsler=lambda x, y: jets.sqrt(energy(x, y)), energy_fn=energy, metric_fn=metric)


def _sphere(n, params):
    r = float(params.get("radius", 1.0))
    if r <= 0:
        raise ConfigError("sphere radius must be positive")

    def conformal(x):
        s = sum((xi * xi for xi in x[1:]), x[0] * x[0]) + 1.0
        return jets.power(s, -2.0) * (4.0 * r * r)

    def metric(x):
        c = conformal(x)
        return [[c if i == j else 0.0 for j in range(n)] for i in range(n)]

    def energy(x, y):
        return conformal(x) * sum((yi * yi for yi in y[1:]), y[0] * y[0])

    return dict(finsler=lambda x, y: jets.sqrt(energy(x, y)), energy_fn=energy, metric_fn=metric)


def _randers(n, params):
    xs, _ = _names(n)
    a_spec = params.get("a", "identity")
    if isinstance(a_spec, str) and a_spec == "identity":
        a_exprs = None
    else:
        if len(a_spec) != n or any(len(row) != n for row in a_spec):
            raise ConfigError(f"randers 'a' must be an {n}x{n} matrix of expressions")
        a_exprs = [[parse(v, xs) for v in row] for row in a_spec]
    b_spec = params.get("b")
    if b_spec is None or len(b_spec) != n:
        raise ConfigError(f"randers needs 'b' with {n} one-form coefficients")
    b_exprs = [parse(v, xs) for v in b_spec]

    def a_matrix(x):
        if a_exprs is None:
            return [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
        env = _env(x, ())
        return [[e(env) for e in row] for row in a_exprs]

    def finsler(x, y):
        env = _env(x, ())
        beta = sum((b_exprs[i](env) * y[i] for i in range(1, n)), b_exprs[0](env) * y[0])
        return jets.sqrt(_quadratic(a_matrix(x), y)) + beta

    def b_norm(x):
        env = _env(list(np.asarray(x, float)), ())
        b = np.array([float(e(env)) for e in b_exprs])
        a = np.array([[float(np.asarray(v)) for v in row] for row in a_matrix(list(np.asarray(x, float)))])
        return float(np.sqrt(b @ np.linalg.solve(a, b)))

    return dict(finsler=finsler, b_norm=b_norm)


def _custom(n, params):
    src = params.get("F")
    if src is None:
        raise ConfigError("custom_polynomial needs an expression 'F' in x1..xn, y1..yn")
    xs, ys = _names(n)
    expr = parse(src, xs + ys)
    return dict(finsler=lambda x, y: expr(_env(x, y)))


_BUILDERS = {
    "euclidean": _euclidean,
    "riemannian_diag": _riemannian_diag,
    "sphere": _sphere,
    "randers": _randers,
    "custom_polynomial": _custom,
}


def builtin_model(family: str, dim: int = 2, name: str | None = None, check_points=None, **params) -> FinslerModel:
    """Assemble a model of a builtin family from jet primitives.

    ``check_points`` (default: the origin) are where positive definiteness is
    validated; Randers models additionally require ``|b|_a < 1`` there.
    """
    if family not in _BUILDERS:
        raise ConfigError(f"unknown model family {family!r} (expected one of {', '.join(FAMILIES)})")
    dim = int(dim)
    if dim < 2:
        raise ConfigError("model dimension must be >= 2")
    parts = _BUILDERS[family](dim, params)
    b_norm = parts.pop("b_norm", None)
    model = FinslerModel(dim=dim, name=name or family, family=family, params=dict(params), **parts)
    points = np.zeros((1, dim)) if check_points is None else np.atleast_2d(np.asarray(check_points, float))
    if b_norm is not None:
        for p in points:
            nb = b_norm(p)
            if nb >= 1.0:
                raise DegenerateMetricError(
                    f"randers |b|_a = {nb:.6g} >= 1 at x={p.tolist()}: metric not positive definite",
                    point=(p, None),
                )
    check_model(model, points)
    return model


def load_model(spec: dict) -> FinslerModel:
    """Model from a parsed config table ``{family, dim, name?, params}``."""
    if not isinstance(spec, dict):
        raise ConfigError("model spec must be a table")
    try:
        family = spec["family"]
    except KeyError:
        raise ConfigError("model spec is missing 'family'") from None
    dim = spec.get("dim", 2)
    if not isinstance(dim, int) or dim < 2:
        raise ConfigError(f"model dim must be an integer >= 2, got {dim!r}")
    params = dict(spec.get("params", {}))
    check = spec.get("check_points")
    return builtin_model(family, dim=dim, name=spec.get("name"), check_points=check, **params)
