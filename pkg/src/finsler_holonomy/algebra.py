"""Closure of curvature fields into Lie algebras, with numerical dimension.

Fields are restricted to the indicatrix at a base point ``p`` by evaluating
them on a fixed sample set; a field joins the basis only when its stacked
values raise the numerical rank of the evaluation matrix.  Ranks are lower
bounds on the dimension of the generated algebra.

Two facts keep the search finite and exact at ``p``:

* the bracket of vertical fields is fiberwise, so brackets only need the
  accepted basis (values of a bracket at p depend on values at p);
* ``nabla_X`` depends on the germ of a field around p, so covariant
  derivatives are explored from every iterate, accepted or not.  Because
  ``nabla_X [a, b] = [nabla_X a, b] + [a, nabla_X b]``, iterated covariant
  derivatives of curvature fields followed by brackets generate the whole
  infinitesimal holonomy algebra at p.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError
from .fields import (
    CovariantDerivative,
    CurvatureField,
    FieldContext,
    IndicatrixField,
    LieBracket,
    MAX_DEPTH,
    basis_vector,
    germ_basis,
)
from .geometry import riemann_tensor
from .models import FinslerModel, fundamental_tensor, indicatrix_sample

DEFAULT_TOL = 1e-8


def numerical_rank(matrix, tol: float = DEFAULT_TOL, atol: float = 0.0):
    """(rank, singular values): count of singular values above
    ``max(tol * s_max, atol)``."""
    a = np.asarray(matrix, dtype=float)
    if a.size == 0:
        return 0, np.zeros(0)
    if not np.all(np.isfinite(a)):
        raise ConfigError("numerical_rank: matrix has non-finite entries")
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] <= atol:
        return 0, s
    return int(np.sum(s > max(tol * s[0], atol))), s


def span_residual(basis, vectors) -> float:
    """Largest relative residual of the columns of ``vectors`` after
    least-squares projection onto the column span of ``basis``."""
    v = np.asarray(vectors, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    norms = np.linalg.norm(v, axis=0)
    if v.shape[1] == 0 or np.all(norms == 0):
        return 0.0
    b = np.asarray(basis, dtype=float)
    if b.size == 0 or b.shape[1] == 0:
        res = v
    else:
        coef, *_ = np.linalg.lstsq(b, v, rcond=None)
        res = v - b @ coef
    r = np.linalg.norm(res, axis=0)
    keep = norms > 0
    return float(np.max(r[keep] / norms[keep]))


@dataclass
class AlgebraOptions:
    max_fields: int = 64
    bracket_depth: int = 4
    nabla_depth: int = 3
    tol: float = DEFAULT_TOL
    samples: int | None = None  # default 4 n^2
    seed: int = 0
    germ_degree: int = 0
    zero_tol: float = 1e-10
    max_depth: int = MAX_DEPTH

    @classmethod
    def from_dict(cls, d: dict | None) -> "AlgebraOptions":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown algebra option(s): {sorted(unknown)}")
        opts = cls(**d)
        opts.validate()
        return opts

    def validate(self):
        for name in ("max_fields", "bracket_depth", "nabla_depth", "seed", "germ_degree", "max_depth"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"algebra option {name} must be a non-negative integer, got {v!r}")
        if self.max_fields < 1:
            raise ConfigError("max_fields must be positive")
        if self.samples is not None and (not isinstance(self.samples, int) or self.samples < 1):
            raise ConfigError(f"samples must be a positive integer, got {self.samples!r}")
        if not (0 < self.tol < 1) or not (0 <= self.zero_tol < 1):
            raise ConfigError("tol must lie in (0, 1) and zero_tol in [0, 1)")

    def sample_count(self, n: int) -> int:
        return self.samples if self.samples is not None else 4 * n * n


@dataclass
class LogEntry:
    field: str
    rule: str
    parents: list
    generation: int
    accepted: bool
    norm: float
    index: int | None = None  # position in the basis when accepted


@dataclass
class FieldBasis:
    """Rank-gated basis of an algebra of indicatrix fields at ``base_point``."""

    kind: str
    fields: list
    base_point: np.ndarray
    sample_set: np.ndarray
    eval_matrix: np.ndarray
    rank: int
    sv_spectrum: np.ndarray
    generation_log: list
    closed: bool
    truncated: bool = False
    flags: list = field(default_factory=list)
    rank_doubled: int | None = None
    options: dict = field(default_factory=dict)

    @property
    def dim_lower_bound(self) -> int:
        return self.rank

    @property
    def condition(self) -> float:
        s = self.sv_spectrum
        if self.rank == 0:
            return 1.0
        return float(s[0] / s[self.rank - 1])

    def normalized_matrix(self) -> np.ndarray:
        m = self.eval_matrix
        if m.shape[1] == 0:
            return m
        return m / np.linalg.norm(m, axis=0)

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "base_point": [float(v) for v in self.base_point],
            "samples": int(len(self.sample_set)),
            "rank": int(self.rank),
            "rank_doubled_samples": None if self.rank_doubled is None else int(self.rank_doubled),
            "closed": bool(self.closed),
            "truncated": bool(self.truncated),
            "condition": float(self.condition),
            "flags": list(self.flags),
            "sv_spectrum": [float(s) for s in self.sv_spectrum],
            "fields": [f.provenance if hasattr(f, "provenance") else str(f) for f in self.fields],
            "generation_log": [asdict(e) for e in self.generation_log],
            "options": dict(self.options),
        }


class RankGate:
    """Incremental rank-gated column set.

    Candidates are normalised; a candidate counts as zero when its RMS entry
    is below ``zero_tol`` or its norm is below ``zero_tol * scale``, where
    ``scale`` is the norm of the first accepted column.
    """

    def __init__(self, tol: float = DEFAULT_TOL, zero_tol: float = 1e-10, scale: float | None = None):
        self.tol = tol
        self.zero_tol = zero_tol
        self.scale = scale
        self.columns: list[np.ndarray] = []
        self.raw: list[np.ndarray] = []
        self.rank = 0

    def is_zero(self, norm: float, size: int) -> bool:
        if norm == 0.0 or not np.isfinite(norm):
            return True
        if norm <= self.zero_tol * np.sqrt(size):
            return True
        return self.scale is not None and norm <= self.zero_tol * self.scale

    def offer(self, v: np.ndarray) -> tuple[bool, float]:
        v = np.asarray(v, dtype=float).ravel()
        norm = float(np.linalg.norm(v))
        if self.is_zero(norm, v.size):
            return False, norm
        if self.scale is None:
            self.scale = norm
        col = v / norm
        trial = np.column_stack(self.columns + [col])
        rank, _ = numerical_rank(trial, self.tol)
        if rank > self.rank:
            self.columns.append(col)
            self.raw.append(v)
            self.rank = rank
            return True, norm
        return False, norm

    def matrix(self) -> np.ndarray:
        if not self.raw:
            return np.zeros((0, 0))
        return np.column_stack(self.raw)


def _pairs_by_generation(gens, k):
    """Index pairs (a, b) with a in generation k and b in generations <= k,
    each unordered pair once, in deterministic order."""
    new = gens[k]
    older = [i for g in gens[:k] for i in g]
    for a, b in itertools.combinations(new, 2):
        yield a, b
    for a in new:
        for b in older:
            yield b, a


class _Closure:
    """Shared state of one closure run at a base point."""

    def __init__(self, kind, model: FinslerModel, p, opts: AlgebraOptions):
        opts.validate()
        self.kind = kind
        self.model = model
        self.p = np.asarray(p, dtype=float)
        if self.p.shape != (model.dim,):
            raise ConfigError(f"base point must have {model.dim} components")
        self.opts = opts
        n = model.dim
        self.y = indicatrix_sample(model, self.p, opts.sample_count(n), opts.seed)
        fundamental_tensor(model, self.p, self.y)  # positive definiteness on the sample set
        self.ctx = FieldContext(model, self.p, self.y)
        self.gate = RankGate(opts.tol, opts.zero_tol)
        self.fields: list[IndicatrixField] = []
        self.log: list[LogEntry] = []
        self.truncated = False

    def values(self, f: IndicatrixField) -> np.ndarray:
        return self.ctx.values(f)

    def consider(self, f: IndicatrixField, rule: str, parents, generation: int) -> bool:
        if self.truncated:
            return False
        accepted, norm = self.gate.offer(self.values(f))
        entry = LogEntry(f.provenance, rule, list(parents), generation, accepted, norm)
        if accepted:
            entry.index = len(self.fields)
            self.fields.append(f)
            if len(self.fields) >= self.opts.max_fields:
                self.truncated = True
        self.log.append(entry)
        return accepted

    def bracket_closure(self, start_gen: int = 0, gens=None) -> bool:
        """Breadth-first brackets; returns True when a full pass added nothing."""
        if gens is None:
            gens = [list(range(len(self.fields)))]
        closed = False
        for depth in range(1, self.opts.bracket_depth + 1):
            k = len(gens) - 1
            added = []
            for a, b in _pairs_by_generation(gens, k):
                if self.truncated:
                    break
                f = LieBracket(self.fields[a], self.fields[b], self.opts.max_depth)
                if self.consider(f, "bracket", [self.fields[a].provenance, self.fields[b].provenance], start_gen + depth):
                    added.append(len(self.fields) - 1)
            if self.truncated:
                break
            if not added:
                closed = True
                break
            gens.append(added)
        else:
            # depth budget spent; closed only if the last pass would add nothing
            closed = self._bracket_pass_adds_nothing(gens)
        return closed and not self.truncated

    def _bracket_pass_adds_nothing(self, gens) -> bool:
        k = len(gens) - 1
        if not gens[k]:
            return True
        probe = RankGate(self.opts.tol, self.opts.zero_tol, self.gate.scale)
        probe.columns = list(self.gate.columns)
        probe.rank = self.gate.rank
        for a, b in _pairs_by_generation(gens, k):
            f = LieBracket(self.fields[a], self.fields[b], self.opts.max_depth + 1)
            if probe.offer(self.values(f))[0]:
                return False
        return True

    def finish(self, closed: bool, extra_flags=()) -> FieldBasis:
        m = self.gate.matrix()
        if m.size == 0:
            m = np.zeros((self.y.size, 0))
        rank, s = numerical_rank(_normalize(m), self.opts.tol)
        flags = list(extra_flags)
        capacity = len(self.y) * (self.model.dim - 1)
        if rank >= capacity:
            flags.append(f"rank saturates sample capacity {capacity}; increase samples")
        if self.truncated:
            flags.append("truncated, dimension is a lower bound only")
        doubled = None
        if self.fields:
            n2 = 2 * len(self.y)
            y2 = indicatrix_sample(self.model, self.p, n2, self.opts.seed)
            ctx2 = FieldContext(self.model, self.p, y2)
            ctx2.reserve(self.fields)
            m2 = np.column_stack([ctx2.values(f).ravel() for f in self.fields])
            doubled, _ = numerical_rank(_normalize(m2), self.opts.tol)
            if doubled != rank:
                flags.append(f"ill-conditioned basis: rank {rank} with {len(self.y)} samples, "
                             f"{doubled} with {n2}")
        else:
            doubled = 0
        return FieldBasis(
            kind=self.kind,
            fields=list(self.fields),
            base_point=self.p,
            sample_set=self.y,
            eval_matrix=m,
            rank=rank,
            sv_spectrum=s,
            generation_log=self.log,
            closed=closed,
            truncated=self.truncated,
            flags=flags,
            rank_doubled=doubled,
            options=asdict(self.opts) | {"samples": len(self.y)},
        )


def _normalize(m):
    if m.shape[1] == 0:
        return m
    return m / np.linalg.norm(m, axis=0)


def curvature_generators(model: FinslerModel) -> list[CurvatureField]:
    n = model.dim
    return [CurvatureField(model, basis_vector(n, i), basis_vector(n, j))
            for i in range(n) for j in range(i + 1, n)]


def generate_curvature_algebra(model: FinslerModel, p, opts: AlgebraOptions | dict | None = None) -> FieldBasis:
    """Curvature algebra at p: brackets of r(e_i, e_j), rank-gated."""
    opts = opts if isinstance(opts, AlgebraOptions) else AlgebraOptions.from_dict(opts)
    run = _Closure("curvature_algebra", model, p, opts)
    seeds = curvature_generators(model)
    run.ctx.reserve(seeds, 0, 1)
    for f in seeds:
        run.consider(f, "curvature", [], 0)
    closed = run.bracket_closure()
    return run.finish(closed)


def _frames(model: FinslerModel, p, degree: int):
    n = model.dim
    if degree == 0:
        return [basis_vector(n, j) for j in range(n)]
    return germ_basis(n, degree, center=p)


def generate_infinitesimal_holonomy(model: FinslerModel, p, opts: AlgebraOptions | dict | None = None) -> FieldBasis:
    """Infinitesimal holonomy algebra at p.

    Iterated covariant derivatives ``nabla_{X_1} ... nabla_{X_k} r(e_i, e_j)``
    (k <= nabla_depth, X from the germ frame) are offered level by level, then
    the accepted set is closed under brackets.
    """
    opts = opts if isinstance(opts, AlgebraOptions) else AlgebraOptions.from_dict(opts)
    run = _Closure("infinitesimal_holonomy", model, p, opts)
    frames = _frames(model, run.p, opts.germ_degree)
    seeds = curvature_generators(model)
    level = list(seeds)
    tree = [level]
    for _ in range(opts.nabla_depth):
        level = [CovariantDerivative(f, X, opts.max_depth) for f in level for X in frames]
        tree.append(level)
    # evaluate everything on one connection jet of the joint order
    run.ctx.reserve([f for lvl in tree for f in lvl], 0, 0)
    for f in seeds:
        run.consider(f, "curvature", [], 0)
    nabla_closed = True
    for depth, lvl in enumerate(tree[1:], start=1):
        added = False
        for f in lvl:
            if run.consider(f, "covariant_derivative", [f.xi.provenance, str(f.X)], depth):
                added = True
        nabla_closed = not added
    flags = []
    if not nabla_closed:
        flags.append(f"covariant derivatives still adding rank at nabla_depth {opts.nabla_depth}")
    if run.fields and not run.truncated:
        run.ctx.reserve(run.fields, 0, 1)
    closed = run.bracket_closure(start_gen=opts.nabla_depth) if run.fields else True
    return run.finish(closed and nabla_closed, flags)


# -- Riemannian oracle ----------------------------------------------------------------

@dataclass
class MatrixAlgebra:
    """Basis of a linear Lie algebra of n x n matrices."""

    basis: list
    dim: int
    sv_spectrum: np.ndarray

    def to_record(self) -> dict:
        return {"dim": self.dim, "basis": [b.tolist() for b in self.basis],
                "sv_spectrum": [float(s) for s in self.sv_spectrum]}


def curvature_operators(model: FinslerModel, p) -> list[np.ndarray]:
    """Classical operators R(e_j, e_k) (j < k) at p from the Levi-Civita route."""
    if not model.is_riemannian:
        raise ConfigError(f"model {model.name!r} is not Riemannian; curvature operators need a_ij(x)")
    Rm = riemann_tensor(model, np.asarray(p, dtype=float))
    n = model.dim
    return [Rm[:, :, j, k] for j in range(n) for k in range(j + 1, n)]


def riemannian_curvature_operator_algebra(model: FinslerModel, p, tol: float = DEFAULT_TOL,
                                          zero_tol: float = 1e-10, max_dim: int | None = None) -> MatrixAlgebra:
    """Matrix Lie algebra generated by the curvature operators at p."""
    ops = curvature_operators(model, p)
    n = model.dim
    max_dim = max_dim or n * n
    gate = RankGate(tol, zero_tol)
    basis = []
    for a in ops:
        if gate.offer(a)[0]:
            basis.append(a)
    frontier = list(basis)
    while frontier and len(basis) < max_dim:
        new = []
        for a in frontier:
            for b in list(basis):
                c = a @ b - b @ a
                if gate.offer(c)[0]:
                    basis.append(c)
                    new.append(c)
        frontier = new
    m = np.column_stack([b.ravel() / np.linalg.norm(b) for b in basis]) if basis else np.zeros((n * n, 0))
    dim, s = numerical_rank(m, tol)
    return MatrixAlgebra(basis, dim, s)


def riemannian_matching_residual(basis: FieldBasis, algebra: MatrixAlgebra) -> float:
    """Two-sided least-squares residual between a field basis and the operator
    algebra acting on the same samples (y -> A y)."""
    y = basis.sample_set
    if algebra.dim == 0 and basis.rank == 0:
        return 0.0
    ops = np.column_stack([(y @ A.T).ravel() for A in algebra.basis]) if algebra.basis else np.zeros((y.size, 0))
    f = basis.normalized_matrix()
    return max(span_residual(ops, f) if f.shape[1] else 0.0, span_residual(f, ops) if ops.shape[1] else 0.0)
