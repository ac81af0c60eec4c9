"""Truncated multivariate Taylor arithmetic (forward-mode jets).

A :class:`Jet` stores every Taylor coefficient of a (possibly tensor- and
batch-valued) quantity up to a truncation set.  The truncation set is a
product of per-group total-degree sets: a space with groups
``((n, 2), (n, 4))`` holds all monomials ``x^a y^b`` with ``|a| <= 2`` and
``|b| <= 4``.  A single group is an ordinary order-``k`` jet; several groups
are jets whose coefficients are themselves jets (nesting), flattened into
one dense table.

Coefficients are stored as an array of shape ``(space.size, *shape)``; the
trailing ``shape`` carries sample batches and tensor indices, and every
operation broadcasts over it.
"""

from __future__ import annotations

import functools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import JetDomainError, JetError

#: Orders accepted by the flat, user-facing constructors.
MAX_FLAT_ORDER = 4
#: Hard cap on any group order inside nested spaces.
MAX_GROUP_ORDER = 16
#: Default near-zero tolerance on the value coefficient for div/sqrt.
DEFAULT_ZERO_TOL = 1e-12

# Bound on elements materialised at once by the convolution kernels.
_CHUNK_ELEMENTS = 1 << 22


def _monomials(nvars: int, order: int) -> np.ndarray:
    """All exponent vectors of ``nvars`` variables with total degree <= order,
    sorted by degree (zero first)."""
    out = [()]
    for _ in range(nvars):
        out = [m + (k,) for m in out for k in range(order + 1) if sum(m) + k <= order]
    out.sort(key=lambda m: (sum(m), tuple(-e for e in m)))
    return np.array(out, dtype=np.int64).reshape(len(out), nvars)


class _Group:
    def __init__(self, nvars: int, order: int):
        self.nvars = nvars
        self.order = order
        self.monomials = _monomials(nvars, order)
        self.size = len(self.monomials)
        self.radix = order + 1
        weights = self.radix ** np.arange(nvars, dtype=np.int64)
        self._weights = weights
        self.lookup = np.full(self.radix**nvars if nvars else 1, -1, dtype=np.int64)
        self.lookup[self.monomials @ weights] = np.arange(self.size)

    def locate(self, exps: np.ndarray) -> np.ndarray:
        """Local positions of exponent rows; -1 where outside the set."""
        if self.nvars == 0:
            return np.zeros(len(exps), dtype=np.int64)
        bad = (exps < 0).any(axis=1) | (exps.sum(axis=1) > self.order)
        codes = np.where(bad, 0, np.clip(exps, 0, self.order) @ self._weights)
        return np.where(bad, -1, self.lookup[codes])

    def pairs(self):
        m = self.monomials
        sums = m[:, None, :] + m[None, :, :]
        ia, ib = np.nonzero(sums.sum(axis=2) <= self.order)
        ic = self.locate(sums[ia, ib])
        return ia, ib, ic


class _Plan:
    """Pair list (a-index, b-index) grouped by product index."""

    __slots__ = ("ia", "ib", "starts", "targets", "deg_a")

    def __init__(self, ia, ib, starts, targets, deg_a=None):
        self.ia = ia
        self.ib = ib
        self.starts = starts
        self.targets = targets
        self.deg_a = deg_a


class JetSpace:
    """Truncation set shared by all jets that take part in one computation."""

    def __init__(self, groups: tuple[tuple[int, int], ...]):
        for nv, order in groups:
            if nv < 0 or order < 0 or order > MAX_GROUP_ORDER:
                raise JetError(f"unsupported jet group (nvars={nv}, order={order})")
        self.groups = groups
        self._groups = [_Group(nv, order) for nv, order in groups]
        self.num_vars = sum(nv for nv, _ in groups)
        self.max_degree = sum(order for _, order in groups)
        sizes = [g.size for g in self._groups]
        self.size = int(np.prod(sizes)) if sizes else 1
        strides = []
        s = 1
        for size in reversed(sizes):
            strides.append(s)
            s *= size
        self._strides = list(reversed(strides))
        # var -> (group index, local var)
        self._var_owner = [(gi, u) for gi, (nv, _) in enumerate(groups) for u in range(nv)]
        grids = np.meshgrid(*[np.arange(n) for n in sizes], indexing="ij") if sizes else []
        parts = [g.monomials[grid.ravel()] for g, grid in zip(self._groups, grids)]
        self.indices = np.concatenate(parts, axis=1) if parts else np.zeros((1, 0), np.int64)
        self.degree = self.indices.sum(axis=1)
        self._product = None
        self._recurrence = None
        self._diff_maps = {}
        self._shift_maps = {}
        self._trunc_maps = {}
        self._units = {}

    def __repr__(self):
        return f"JetSpace({self.groups})"

    def locate(self, exps: np.ndarray) -> np.ndarray:
        exps = np.atleast_2d(np.asarray(exps, dtype=np.int64))
        pos = np.zeros(len(exps), dtype=np.int64)
        bad = np.zeros(len(exps), dtype=bool)
        col = 0
        for g, stride in zip(self._groups, self._strides):
            local = g.locate(exps[:, col:col + g.nvars])
            bad |= local < 0
            pos += local * stride
            col += g.nvars
        return np.where(bad, -1, pos)

    def unit(self, var: int) -> int:
        if var not in self._units:
            e = np.zeros(self.num_vars, dtype=np.int64)
            e[var] = 1
            self._units[var] = int(self.locate(e)[0])
        return self._units[var]

    @property
    def product(self) -> _Plan:
        if self._product is None:
            ia = np.zeros(1, np.int64)
            ib = np.zeros(1, np.int64)
            ic = np.zeros(1, np.int64)
            for g, stride in zip(self._groups, self._strides):
                ga, gb, gc = g.pairs()
                ia = (ia[:, None] + ga[None, :] * stride).ravel()
                ib = (ib[:, None] + gb[None, :] * stride).ravel()
                ic = (ic[:, None] + gc[None, :] * stride).ravel()
            order = np.argsort(ic, kind="stable")
            ia, ib, ic = ia[order], ib[order], ic[order]
            starts = np.flatnonzero(np.r_[True, ic[1:] != ic[:-1]])
            self._product = _Plan(ia, ib, starts, ic[starts])
        return self._product

    @property
    def recurrence(self) -> list[_Plan]:
        """Per-degree pair plans used by the power and inverse recurrences:
        pairs with ``|a| >= 1`` that land on a coefficient of degree ``d``."""
        if self._recurrence is None:
            plan = self.product
            ic = np.repeat(plan.targets, np.diff(np.r_[plan.starts, len(plan.ia)]))
            deg_c = self.degree[ic]
            deg_a = self.degree[plan.ia]
            plans = [None]
            for d in range(1, self.max_degree + 1):
                sel = np.flatnonzero((deg_c == d) & (deg_a >= 1))
                if len(sel) == 0:
                    plans.append(None)
                    continue
                c = ic[sel]
                starts = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
                plans.append(_Plan(plan.ia[sel], plan.ib[sel], starts, c[starts], deg_a[sel]))
            self._recurrence = plans
        return self._recurrence

    def lowered(self, var: int) -> "JetSpace":
        gi, _ = self._var_owner[var]
        groups = list(self.groups)
        nv, order = groups[gi]
        if order == 0:
            raise JetError(f"cannot differentiate variable {var}: group order is 0")
        groups[gi] = (nv, order - 1)
        return jet_space(tuple(groups))

    def diff_map(self, var: int):
        if var not in self._diff_maps:
            target = self.lowered(var)
            exps = target.indices.copy()
            factor = exps[:, var] + 1.0
            exps[:, var] += 1
            src = self.locate(exps)
            self._diff_maps[var] = (target, src, factor)
        return self._diff_maps[var]

    def shift_map(self, var: int):
        """(targets, sources) realising multiplication by the monomial v_var."""
        if var not in self._shift_maps:
            exps = self.indices.copy()
            targets = np.flatnonzero(exps[:, var] >= 1)
            exps = exps[targets]
            exps[:, var] -= 1
            self._shift_maps[var] = (targets, self.locate(exps))
        return self._shift_maps[var]

    def truncation_map(self, target: "JetSpace") -> np.ndarray:
        key = target.groups
        if key not in self._trunc_maps:
            if len(target.groups) != len(self.groups) or any(
                tv != sv or to > so for (tv, to), (sv, so) in zip(target.groups, self.groups)
            ):
                raise JetError(f"cannot truncate {self} to {target}")
            self._trunc_maps[key] = self.locate(target.indices)
        return self._trunc_maps[key]


@functools.lru_cache(maxsize=None)
def jet_space(groups) -> JetSpace:
    """Shared :class:`JetSpace` for ``groups`` (tuple of ``(nvars, order)``)."""
    groups = tuple((int(nv), int(order)) for nv, order in groups)
    return JetSpace(groups)


def _expand(arr: np.ndarray, ndim: int) -> np.ndarray:
    """Insert unit axes after the coefficient axis so trailing shapes align."""
    extra = ndim - (arr.ndim - 1)
    if extra <= 0:
        return arr
    return arr.reshape(arr.shape[:1] + (1,) * extra + arr.shape[1:])


def _convolve(space: JetSpace, a: np.ndarray, b: np.ndarray, kernel) -> np.ndarray:
    plan = space.product
    npairs = len(plan.ia)
    probe = kernel(a[:1], b[:1])
    per_pair = max(1, probe[0].size)
    budget = max(1, _CHUNK_ELEMENTS // per_pair)
    if npairs <= budget:
        return np.add.reduceat(kernel(a[plan.ia], b[plan.ib]), plan.starts, axis=0)
    out = np.empty((space.size,) + probe.shape[1:], dtype=probe.dtype)
    starts = plan.starts
    nseg = len(starts)
    seg = 0
    while seg < nseg:
        hi = int(np.searchsorted(starts, starts[seg] + budget, side="right"))
        hi = max(hi, seg + 1)
        lo_pair = starts[seg]
        hi_pair = starts[hi] if hi < nseg else npairs
        sl = slice(lo_pair, hi_pair)
        out[seg:hi] = np.add.reduceat(
            kernel(a[plan.ia[sl]], b[plan.ib[sl]]), starts[seg:hi] - lo_pair, axis=0
        )
        seg = hi
    return out


class Jet:
    """Truncated Taylor expansion over a :class:`JetSpace`.

    Jets are immutable values; arithmetic returns new jets.
    """

    __slots__ = ("space", "coeffs")
    __array_ufunc__ = None

    def __init__(self, space: JetSpace, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[:1] != (space.size,):
            raise JetError(f"coefficient table has {coeffs.shape[:1]} rows, space needs {space.size}")
        self.space = space
        self.coeffs = coeffs

    # -- basic views ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.coeffs.shape[1:]

    @property
    def value(self) -> np.ndarray:
        return self.coeffs[0]

    @property
    def num_vars(self) -> int:
        return self.space.num_vars

    @property
    def order(self) -> int:
        return self.space.groups[0][1] if len(self.space.groups) == 1 else self.space.max_degree

    def __repr__(self):
        return f"Jet(space={self.space.groups}, shape={self.shape}, value={self.value!r})"

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Jet(self.space, self.coeffs[(slice(None),) + idx])

    def __len__(self):
        return self.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def T(self) -> "Jet":
        return self.swapaxes(-1, -2)

    def swapaxes(self, a: int, b: int) -> "Jet":
        nd = len(self.shape)
        a = a % nd + 1
        b = b % nd + 1
        return Jet(self.space, np.swapaxes(self.coeffs, a, b))

    def reshape(self, *shape) -> "Jet":
        return Jet(self.space, self.coeffs.reshape((self.space.size,) + tuple(shape)))

    # -- arithmetic ----------------------------------------------------
    def _check(self, other: "Jet"):
        if other.space is not self.space:
            raise JetError(f"incompatible jet spaces {self.space.groups} and {other.space.groups}")

    def _add_constant(self, c, sign=1.0) -> "Jet":
        c = np.asarray(c, dtype=float)
        shape = np.broadcast_shapes(self.shape, c.shape)
        coeffs = np.array(np.broadcast_to(_expand(self.coeffs, len(shape)), (self.space.size,) + shape))
        if sign < 0:
            coeffs = -coeffs
        coeffs[0] += c
        return Jet(self.space, coeffs)

    def __add__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            nd = max(len(self.shape), len(other.shape))
            return Jet(self.space, _expand(self.coeffs, nd) + _expand(other.coeffs, nd))
        return self._add_constant(other)

    __radd__ = __add__

    def __neg__(self):
        return Jet(self.space, -self.coeffs)

    def __pos__(self):
        return self

    def __sub__(self, other):
        if isinstance(other, Jet):
            return self + (-other)
        return self._add_constant(-np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return self._add_constant(other, sign=-1.0)

    def scale(self, c) -> "Jet":
        c = np.asarray(c, dtype=float)
        nd = max(len(self.shape), c.ndim)
        return Jet(self.space, _expand(self.coeffs, nd) * c[None])

    def __mul__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            nd = max(len(self.shape), len(other.shape))
            return Jet(self.space, _convolve(self.space, _expand(self.coeffs, nd), _expand(other.coeffs, nd), np.multiply))
        return self.scale(other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.reciprocal()
        other = np.asarray(other, dtype=float)
        if np.any(np.abs(other) <= 0.0):
            raise JetDomainError("division by zero constant")
        return self.scale(1.0 / other)

    def __rtruediv__(self, other):
        return self.reciprocal().scale(other)

    def __pow__(self, p):
        return power(self, p)

    # -- unary series --------------------------------------------------
    def power(self, p: float, zero_tol: float = DEFAULT_ZERO_TOL, what: str = "pow") -> "Jet":
        """Composition with ``t -> t**p`` (real ``p``) via the Euler-operator
        recurrence ``a * E(u) = p * u * E(a)``."""
        a = self.coeffs
        a0 = a[0]
        integral = float(p).is_integer()
        if np.any(np.abs(a0) <= zero_tol):
            raise JetDomainError(f"{what}: value coefficient too close to zero (min |v| = {np.min(np.abs(a0)):.3e})")
        if not integral and np.any(a0 < 0):
            raise JetDomainError(f"{what}: negative value {np.min(a0):.6g} for non-integer power {p}")
        u = np.zeros_like(a)
        u[0] = a0**p
        for d, plan in enumerate(self.space.recurrence):
            if plan is None:
                continue
            w = ((p + 1.0) * plan.deg_a - d).reshape((-1,) + (1,) * (a.ndim - 1))
            terms = w * a[plan.ia] * u[plan.ib]
            u[plan.targets] = np.add.reduceat(terms, plan.starts, axis=0) / (d * a0)
        return Jet(self.space, u)

    def sqrt(self, zero_tol: float = DEFAULT_ZERO_TOL) -> "Jet":
        if np.any(self.value < 0):
            raise JetDomainError(f"sqrt of negative value {np.min(self.value):.6g}")
        return self.power(0.5, zero_tol, what="sqrt")

    def reciprocal(self, zero_tol: float = DEFAULT_ZERO_TOL) -> "Jet":
        return self.power(-1.0, zero_tol, what="division")

    # -- calculus ------------------------------------------------------
    def diff(self, var: int) -> "Jet":
        """Exact partial derivative; the owning group loses one order."""
        target, src, factor = self.space.diff_map(var)
        return Jet(target, self.coeffs[src] * factor.reshape((-1,) + (1,) * len(self.shape)))

    def truncate(self, target: JetSpace) -> "Jet":
        if target is self.space:
            return self
        return Jet(target, self.coeffs[self.space.truncation_map(target)])

    def partial(self, multi_index: Sequence[int]) -> np.ndarray:
        """Mixed partial derivative for a list of variable indices."""
        exps = np.zeros(self.space.num_vars, dtype=np.int64)
        for v in multi_index:
            if not 0 <= v < self.space.num_vars:
                raise JetError(f"variable index {v} out of range")
            exps[v] += 1
        pos = self.space.locate(exps)[0]
        if pos < 0:
            raise JetError(f"partial {list(multi_index)} exceeds truncation {self.space.groups}")
        fact = float(np.prod([math.factorial(int(e)) for e in exps]))
        return self.coeffs[pos] * fact


# -- module-level helpers ---------------------------------------------------

def constant(space: JetSpace, value) -> Jet:
    value = np.asarray(value, dtype=float)
    coeffs = np.zeros((space.size,) + value.shape)
    coeffs[0] = value
    return Jet(space, coeffs)


def variable(space: JetSpace, var: int, value) -> Jet:
    """Jet of the coordinate function ``v_var`` expanded at ``value``."""
    jet = constant(space, value)
    pos = space.unit(var)
    if pos >= 0:
        jet.coeffs[pos] = 1.0
    return jet


def variables(space: JetSpace, values, first: int = 0) -> Jet:
    """Vector jet of consecutive coordinates ``v_first..``; ``values`` has the
    coordinate axis last."""
    values = np.asarray(values, dtype=float)
    k = values.shape[-1]
    coeffs = np.zeros((space.size,) + values.shape)
    coeffs[0] = values
    for i in range(k):
        pos = space.unit(first + i)
        if pos >= 0:  # order-0 groups carry no linear term
            coeffs[pos, ..., i] = 1.0
    return Jet(space, coeffs)


def stack(jets: Sequence[Jet], axis: int = -1) -> Jet:
    space = jets[0].space
    for j in jets[1:]:
        if j.space is not space:
            raise JetError("cannot stack jets from different spaces")
    nd = max(len(j.shape) for j in jets)
    arrays = [np.broadcast_to(_expand(j.coeffs, nd), (space.size,) + np.broadcast_shapes(*[j.shape for j in jets]))
              for j in jets]
    ax = axis if axis < 0 else axis + 1
    return Jet(space, np.stack(arrays, axis=ax))


def einsum(subscripts: str, a, b) -> Jet:
    """Bilinear contraction ``np.einsum(subscripts, a, b)`` lifted to jets."""
    if not isinstance(a, Jet):
        return Jet(b.space, np.einsum(_lead(subscripts, second=True), np.asarray(a, float), b.coeffs))
    if not isinstance(b, Jet):
        return Jet(a.space, np.einsum(_lead(subscripts, first=True), a.coeffs, np.asarray(b, float)))
    a._check(b)
    inputs, out = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    spec = f"Z{sa},Z{sb}->Z{out}"
    return Jet(a.space, _convolve(a.space, a.coeffs, b.coeffs, lambda x, y: np.einsum(spec, x, y)))


def _lead(subscripts: str, first=False, second=False) -> str:
    inputs, out = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    if first:
        return f"Z{sa},{sb}->Z{out}"
    return f"{sa},Z{sb}->Z{out}"


def contract_linear(t: Jet, axis: int, values, first_var: int) -> Jet:
    """Contract tensor axis ``axis`` of ``t`` against the linear vector jet
    ``values[..., k] + v_{first_var + k}`` without a full convolution.

    ``values`` has the contracted index last and broadcasts (numpy rules)
    against the shape of ``t`` with ``axis`` moved to the end.
    """
    nd = len(t.shape)
    ax = axis % nd
    coeffs = np.moveaxis(t.coeffs, ax + 1, -1)
    values = np.asarray(values, dtype=float)
    out = np.einsum("...k,...k->...", coeffs, values[None])
    for k in range(coeffs.shape[-1]):
        targets, sources = t.space.shift_map(first_var + k)
        out[targets] += coeffs[sources, ..., k]
    return Jet(t.space, out)


def matmul(a: Jet, b: Jet) -> Jet:
    """Batched matrix product over the last two axes."""
    a._check(b)
    nd = max(len(a.shape), len(b.shape))
    return Jet(a.space, _convolve(a.space, _expand(a.coeffs, nd), _expand(b.coeffs, nd), np.matmul))


def inverse(m: Jet) -> Jet:
    """Inverse of a matrix-valued jet (last two axes), by degree recurrence."""
    g = m.coeffs
    g0inv = np.linalg.inv(g[0])
    z = np.zeros_like(g)
    z[0] = g0inv
    for plan in m.space.recurrence:
        if plan is None:
            continue
        s = np.add.reduceat(np.matmul(g[plan.ia], z[plan.ib]), plan.starts, axis=0)
        z[plan.targets] = -np.matmul(g0inv, s)
    return Jet(m.space, z)


def sqrt(a):
    if isinstance(a, Jet):
        return a.sqrt()
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise JetDomainError(f"sqrt of negative value {np.min(a):.6g}")
    return np.sqrt(a)


def power(a, p):
    """``a ** p`` for jets or plain numbers; non-negative integer powers use
    repeated multiplication so they stay valid at zero values."""
    if isinstance(p, Jet):
        raise JetError("jet-valued exponents are not supported")
    p = float(p)
    if not isinstance(a, Jet):
        a = np.asarray(a, dtype=float)
        if not p.is_integer() and np.any(a < 0):
            raise JetDomainError(f"pow: negative base {np.min(a):.6g} for non-integer power {p}")
        return a**p
    if p.is_integer() and p >= 0:
        k = int(p)
        result = constant(a.space, np.ones(a.shape))
        base = a
        while k:
            if k & 1:
                result = result * base
            k >>= 1
            if k:
                base = base * base
        return result
    return a.power(p)


# -- flat, user-facing operations ---------------------------------------------

def seed_variable(index: int, value: float, num_vars: int, order: int) -> Jet:
    """Coordinate function ``v_index`` as an order-``order`` jet in ``num_vars``
    variables."""
    if not 1 <= order <= MAX_FLAT_ORDER:
        raise JetError(f"jet order {order} unsupported (allowed 1..{MAX_FLAT_ORDER})")
    if not 0 <= index < num_vars:
        raise JetError(f"variable index {index} out of range for {num_vars} variables")
    return variable(jet_space(((num_vars, order),)), index, value)


_BINARY: dict[str, Callable] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}


def jet_arith(a: Jet, b: Jet, op: str) -> Jet:
    try:
        fn = _BINARY[op]
    except KeyError:
        raise JetError(f"unknown binary jet operation {op!r}") from None
    if isinstance(a, Jet) and isinstance(b, Jet):
        a._check(b)
    return fn(a, b)


def jet_unary(a: Jet, op: str, param: float | None = None, zero_tol: float = DEFAULT_ZERO_TOL) -> Jet:
    if op == "sqrt":
        if np.any(a.value < 0):
            raise JetDomainError(f"sqrt of negative value {np.min(a.value):.6g}")
        return a.sqrt(zero_tol)
    if op == "pow_real":
        if param is None:
            raise JetError("pow_real needs an exponent")
        if float(param).is_integer() and param >= 0:
            return power(a, param)
        return a.power(param, zero_tol)
    if op == "neg":
        return -a
    if op == "scale":
        if param is None:
            raise JetError("scale needs a factor")
        return a.scale(param)
    if op == "reciprocal":
        return a.reciprocal(zero_tol)
    raise JetError(f"unknown unary jet operation {op!r}")


def extract_partial(a: Jet, multi_index: Sequence[int]) -> np.ndarray:
    return a.partial(multi_index)
