"""Vertical vector fields on the indicatrix bundle.

A field is an expression tree whose leaves are curvature fields
``r(X, Y)(x, y) = R(x, y)(X, Y)`` and whose inner nodes are fiberwise Lie
brackets and horizontal Berwald covariant derivatives.  Evaluating a node at
orders ``(ox, oy)`` returns a jet over ``xy_space(n, ox, oy)``, so parents can
differentiate their children exactly:

* ``[xi, eta]`` at (ox, oy) needs its children at (ox, oy + 1)
* ``nabla_X xi`` at (ox, oy) needs ``xi`` at (ox + 1, oy + 1)
* ``r(X, Y)`` at (ox, oy) needs the curvature jet at (ox, oy)

Field components are positively 1-homogeneous in y, i.e. the fields commute
with the Liouville field, so they restrict to every indicatrix.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import jets
from .errors import ConfigError, FieldDepthError
from .expressions import Expression, parse
from .geometry import ConnectionJets, _points, _xdiff, _ydiff, connection_jets, xy_space
from .models import FinslerModel, fundamental_tensor, indicatrix_sample

MAX_DEPTH = 12


# -- vector fields on the chart --------------------------------------------------

@dataclass(frozen=True, eq=False)
class VectorFieldSpec:
    """Coordinate-polynomial vector field X(x) on the chart (constants allowed)."""

    components: tuple
    label: str

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def is_constant(self) -> bool:
        return all(not isinstance(c, Expression) for c in self.components)

    def constant_value(self) -> np.ndarray:
        return np.array([float(c) for c in self.components])

    def at(self, x) -> np.ndarray:
        """Numeric values at points ``x`` (coordinate axis last)."""
        x = np.asarray(x, dtype=float)
        return np.stack([self._component(c, list(np.moveaxis(x, -1, 0)), x.shape[:-1]) for c in self.components], -1)

    def jet(self, xj: jets.Jet):
        """Jet of X over the space of ``xj`` (a (B, n) jet of the x coordinates);
        constant fields return a plain array."""
        if self.is_constant:
            return self.constant_value()
        xs = [xj[..., i] for i in range(self.dim)]
        comps = []
        for c in self.components:
            v = c({f"x{i + 1}": xi for i, xi in enumerate(xs)}) if isinstance(c, Expression) else float(c)
            if not isinstance(v, jets.Jet):
                v = jets.constant(xj.space, np.full(xj.shape[:-1], float(v)))
            comps.append(v)
        return jets.stack(comps, axis=-1)

    @staticmethod
    def _component(c, xs, batch):
        if isinstance(c, Expression):
            return np.broadcast_to(np.asarray(c({f"x{i + 1}": v for i, v in enumerate(xs)}), float), batch)
        return np.full(batch, float(c))

    def __str__(self):
        return self.label


def basis_vector(n: int, j: int) -> VectorFieldSpec:
    comps = tuple(1.0 if i == j else 0.0 for i in range(n))
    return VectorFieldSpec(comps, f"e{j + 1}")


def constant_vector(v, label: str | None = None) -> VectorFieldSpec:
    v = tuple(float(c) for c in np.asarray(v, dtype=float).ravel())
    if label is None:
        nz = [i for i, c in enumerate(v) if c != 0]
        if len(nz) == 1 and v[nz[0]] == 1.0:
            label = f"e{nz[0] + 1}"
        else:
            label = "(" + ",".join(f"{c:g}" for c in v) + ")"
    return VectorFieldSpec(v, label)


def vector_field(spec, n: int) -> VectorFieldSpec:
    """Build a field from a config value: ``"e2"``, a list of numbers, or a
    list of polynomial expressions in x1..xn."""
    if isinstance(spec, VectorFieldSpec):
        if spec.dim != n:
            raise ConfigError(f"vector field {spec} has {spec.dim} components, expected {n}")
        return spec
    if isinstance(spec, str):
        s = spec.strip()
        if s.startswith("e") and s[1:].isdigit() and 1 <= int(s[1:]) <= n:
            return basis_vector(n, int(s[1:]) - 1)
        raise ConfigError(f"cannot interpret vector field {spec!r}")
    try:
        items = list(spec)
    except TypeError:
        raise ConfigError(f"cannot interpret vector field {spec!r}") from None
    if len(items) != n:
        raise ConfigError(f"vector field {spec!r} needs {n} components")
    if all(isinstance(c, (int, float)) for c in items):
        return constant_vector(items)
    names = [f"x{i + 1}" for i in range(n)]
    comps = []
    for c in items:
        e = parse(c, names)
        comps.append(float(e({})) if e.is_constant else e)
    return VectorFieldSpec(tuple(comps), "(" + ",".join(str(c) for c in items) + ")")


def monomial_field(n: int, j: int, alpha, center=None) -> VectorFieldSpec:
    """(x - center)^alpha e_j as a polynomial vector field (center defaults to 0)."""
    alpha = tuple(int(a) for a in alpha)
    if not any(alpha):
        return basis_vector(n, j)
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)

    def factor(i):
        base = f"x{i + 1}" if c[i] == 0 else f"(x{i + 1}-({c[i]!r}))"
        return f"{base}**{alpha[i]}" if alpha[i] > 1 else base

    mono = "*".join(factor(i) for i in range(n) if alpha[i])
    expr = parse(mono, [f"x{i + 1}" for i in range(n)])
    comps = tuple(expr if i == j else 0.0 for i in range(n))
    return VectorFieldSpec(comps, f"{mono}*e{j + 1}")


def germ_basis(n: int, degree: int, center=None) -> list[VectorFieldSpec]:
    """Monomial germs (x - center)^alpha e_j with |alpha| <= degree."""
    out = []
    for d in range(degree + 1):
        for alpha in itertools.product(range(d + 1), repeat=n):
            if sum(alpha) != d:
                continue
            out.extend(monomial_field(n, j, alpha, center) for j in range(n))
    return out


# -- evaluation context --------------------------------------------------------------

class FieldContext:
    """Evaluation points plus caches shared by every field evaluated on them.

    ``x`` and ``y`` are broadcast to (B, n).  Connection jets are computed once
    at the largest order requested and truncated for smaller requests.
    """

    def __init__(self, model: FinslerModel, x, y):
        self.model = model
        self.x, self.y, self.batch = _points(model, x, y)
        self._conn: ConnectionJets | None = None
        self._conn_cache = {}
        self._memo = {}

    @property
    def n(self) -> int:
        return self.model.dim

    def reserve(self, fields, ox: int = 0, oy: int = 0):
        """Precompute the connection at the joint order needed by ``fields``."""
        orders = [o for f in fields for o in f.connection_orders(ox, oy)]
        if orders:
            self.connection(max(a for a, _ in orders), max(b for _, b in orders))

    def connection(self, ox: int, oy: int) -> ConnectionJets:
        key = (ox, oy)
        if key in self._conn_cache:
            return self._conn_cache[key]
        c = self._conn
        if c is None or c.space.groups[0][1] < ox or c.space.groups[1][1] < oy:
            if c is not None:
                ox = max(ox, c.space.groups[0][1])
                oy = max(oy, c.space.groups[1][1])
            c = self._conn = connection_jets(self.model, self.x, self.y, ox, oy)
            self._conn_cache = {}
        space = xy_space(self.n, *key)
        out = ConnectionJets(space, c.G.truncate(space), c.Gj.truncate(space), c.Gjk.truncate(space), c.R.truncate(space))
        self._conn_cache[key] = out
        return out

    def xjet(self, ox: int, oy: int) -> jets.Jet:
        return jets.variables(xy_space(self.n, ox, oy), self.x, first=0)

    def evaluate(self, field: "IndicatrixField", ox: int = 0, oy: int = 0) -> jets.Jet:
        # entries keep their field alive so an id is never reused while cached
        key = (id(field), ox, oy)
        if key not in self._memo:
            hit = None
            for (fid, a, b), (_, v) in self._memo.items():
                if fid == id(field) and a >= ox and b >= oy:
                    hit = v
                    break
            if hit is not None:
                self._memo[key] = (field, hit.truncate(xy_space(self.n, ox, oy)))
            else:
                self._memo[key] = (field, field._jet(self, ox, oy))
        return self._memo[key][1]

    def values(self, field: "IndicatrixField") -> np.ndarray:
        return self.evaluate(field).value.reshape(self.batch + (self.n,))

    def jacobian(self, field: "IndicatrixField") -> np.ndarray:
        """d xi^i / d y^k as [..., i, k]."""
        j = _ydiff(self.evaluate(field, 0, 1), self.n)
        return j.value.reshape(self.batch + (self.n, self.n))


# -- fields ------------------------------------------------------------------------------

class IndicatrixField:
    """Base class: a vertical vector field xi(x, y) with a provenance string."""

    model: FinslerModel
    provenance: str
    depth: int

    def _jet(self, ctx: FieldContext, ox: int, oy: int) -> jets.Jet:  # pragma: no cover
        raise NotImplementedError

    def connection_orders(self, ox: int, oy: int):
        """Connection orders this field needs when evaluated at (ox, oy)."""
        raise NotImplementedError  # pragma: no cover

    def evaluate(self, x, y) -> np.ndarray:
        """Field values at points (coordinate axis last)."""
        ctx = FieldContext(self.model, x, y)
        ctx.reserve([self])
        return ctx.values(self)

    __call__ = evaluate

    def jacobian(self, x, y) -> np.ndarray:
        ctx = FieldContext(self.model, x, y)
        ctx.reserve([self], 0, 1)
        return ctx.jacobian(self)

    def __str__(self):
        return self.provenance

    def __repr__(self):
        return f"{type(self).__name__}({self.provenance})"


class CurvatureField(IndicatrixField):
    def __init__(self, model: FinslerModel, X: VectorFieldSpec, Y: VectorFieldSpec):
        self.model = model
        self.X = vector_field(X, model.dim)
        self.Y = vector_field(Y, model.dim)
        self.provenance = f"r({self.X},{self.Y})"
        self.depth = 0

    def connection_orders(self, ox, oy):
        return [(ox, oy)]

    def _jet(self, ctx, ox, oy):
        R = ctx.connection(ox, oy).R
        if self.X.is_constant and self.Y.is_constant:
            return jets.Jet(R.space, np.einsum("mbijk,j,k->mbi", R.coeffs, self.X.constant_value(), self.Y.constant_value()))
        xj = ctx.xjet(ox, oy)
        X, Y = self.X.jet(xj), self.Y.jet(xj)
        RX = jets.einsum("bijk,bj->bik", R, X) if isinstance(X, jets.Jet) else \
            jets.Jet(R.space, np.einsum("mbijk,j->mbik", R.coeffs, X))
        if isinstance(Y, jets.Jet):
            return jets.einsum("bik,bk->bi", RX, Y)
        return jets.Jet(R.space, np.einsum("mbik,k->mbi", RX.coeffs, Y))


class LinearField(IndicatrixField):
    """xi(x, y) = A y for a constant matrix A (rotation generators etc.)."""

    def __init__(self, model: FinslerModel, A, label: str | None = None):
        self.model = model
        self.A = np.array(A, dtype=float)
        if self.A.shape != (model.dim, model.dim):
            raise ConfigError(f"linear field needs a {model.dim}x{model.dim} matrix")
        self.provenance = label or f"lin{self.A.tolist()}"
        self.depth = 0

    def connection_orders(self, ox, oy):
        return []

    def _jet(self, ctx, ox, oy):
        Y = jets.variables(xy_space(ctx.n, ox, oy), ctx.y, first=ctx.n)
        return jets.einsum("ij,bj->bi", self.A, Y)


def _check_depth(depth: int, max_depth: int):
    if depth > max_depth:
        raise FieldDepthError(f"field expression depth {depth} exceeds the cap of {max_depth}")


class LieBracket(IndicatrixField):
    """Fiberwise bracket [xi, eta]^i = xi^k d_k eta^i - eta^k d_k xi^i (x as parameter)."""

    def __init__(self, xi: IndicatrixField, eta: IndicatrixField, max_depth: int = MAX_DEPTH):
        if xi.model is not eta.model:
            raise ConfigError("bracket of fields over different models")
        self.model = xi.model
        self.xi, self.eta = xi, eta
        self.depth = 1 + max(xi.depth, eta.depth)
        _check_depth(self.depth, max_depth)
        self.provenance = f"[{xi.provenance}, {eta.provenance}]"

    def connection_orders(self, ox, oy):
        return self.xi.connection_orders(ox, oy + 1) + self.eta.connection_orders(ox, oy + 1)

    def _jet(self, ctx, ox, oy):
        n = ctx.n
        space = xy_space(n, ox, oy)
        a = ctx.evaluate(self.xi, ox, oy + 1)
        b = ctx.evaluate(self.eta, ox, oy + 1)
        da = _ydiff(a, n)  # [b, i, k]
        db = _ydiff(b, n)
        at, bt = a.truncate(space), b.truncate(space)
        return jets.einsum("bk,bik->bi", at, db) - jets.einsum("bk,bik->bi", bt, da)


class CovariantDerivative(IndicatrixField):
    """nabla_X xi = (d_j xi^i - G^k_j d_{y^k} xi^i + G^i_jk xi^k) X^j."""

    def __init__(self, xi: IndicatrixField, X: VectorFieldSpec, max_depth: int = MAX_DEPTH):
        self.model = xi.model
        self.xi = xi
        self.X = vector_field(X, xi.model.dim)
        self.depth = 1 + xi.depth
        _check_depth(self.depth, max_depth)
        self.provenance = f"∇_{{{self.X}}} {xi.provenance}"

    def connection_orders(self, ox, oy):
        return [(ox, oy)] + self.xi.connection_orders(ox + 1, oy + 1)

    def _jet(self, ctx, ox, oy):
        n = ctx.n
        space = xy_space(n, ox, oy)
        c = ctx.connection(ox, oy)
        xi = ctx.evaluate(self.xi, ox + 1, oy + 1)
        dx = _xdiff(xi, n).truncate(space)  # [b, i, j]
        dy = _ydiff(xi, n).truncate(space)  # [b, i, k]
        xs = xi.truncate(space)
        term = dx - jets.einsum("bkj,bik->bij", c.Gj, dy) + jets.einsum("bijk,bk->bij", c.Gjk, xs)
        X = self.X.jet(ctx.xjet(ox, oy))
        if isinstance(X, jets.Jet):
            return jets.einsum("bij,bj->bi", term, X)
        return jets.Jet(space, np.einsum("mbij,j->mbi", term.coeffs, X))


def curvature_field(model: FinslerModel, X, Y) -> CurvatureField:
    return CurvatureField(model, vector_field(X, model.dim), vector_field(Y, model.dim))


def lie_bracket(xi: IndicatrixField, eta: IndicatrixField, max_depth: int = MAX_DEPTH) -> LieBracket:
    return LieBracket(xi, eta, max_depth)


def covariant_derivative(xi: IndicatrixField, X, max_depth: int = MAX_DEPTH) -> CovariantDerivative:
    return CovariantDerivative(xi, X, max_depth)


def evaluate_fields(fields, x, y) -> np.ndarray:
    """Values of several fields on shared points: array [field, ..., i]."""
    if not fields:
        return np.zeros((0,) + np.broadcast_shapes(np.shape(x), np.shape(y)))
    ctx = FieldContext(fields[0].model, x, y)
    ctx.reserve(fields)
    return np.stack([ctx.values(f) for f in fields])


def metric_orthogonality_check(xi: IndicatrixField, x, samples: int = 100, seed: int = 0) -> float:
    """max over indicatrix samples at x of |g_{x,y}(y, xi(x, y))|."""
    y = indicatrix_sample(xi.model, x, samples, seed)
    g = fundamental_tensor(xi.model, np.asarray(x, float), y).g
    v = xi.evaluate(x, y)
    return float(np.max(np.abs(np.einsum("bi,bij,bj->b", y, g, v)))) if len(y) else 0.0
