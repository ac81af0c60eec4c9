"""Geodesic spray, Berwald connection and curvature on a chart, by jets.

Conventions (all arrays carry a leading sample axis ``b``):

* ``G[b, i]``          spray coefficients, geodesics solve x'' + 2 G(x, x') = 0
* ``Gj[b, i, j]``      nonlinear connection  dG^i/dy^j
* ``Gjk[b, i, j, k]``  Berwald coefficients  d^2 G^i/dy^j dy^k
* ``R[b, i, j, k]``    curvature  R^i_jk = d_k G^i_j - d_j G^i_k + G^m_j G^i_km - G^m_k G^i_jm

The curvature vector field of X, Y is ``r(X, Y)(y)^i = R^i_jk(x, y) X^j Y^k``.

Every quantity is produced as a jet over a product space ``((n, ox), (n, oy))``
in (x, y) so derived fields can differentiate it further.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import jets
from .errors import ConfigError, DegenerateMetricError
from .models import FinslerModel, _check_positive


def _points(model: FinslerModel, x, y):
    """Broadcast x, y to (B, n) arrays; also return the original batch shape."""
    n = model.dim
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1:] != (n,) or y.shape[-1:] != (n,):
        raise ConfigError(f"points must have {n} components (got x {x.shape}, y {y.shape})")
    shape = np.broadcast_shapes(x.shape, y.shape)
    batch = shape[:-1]
    x = np.broadcast_to(x, shape).reshape(-1, n)
    y = np.broadcast_to(y, shape).reshape(-1, n)
    if np.any(np.all(y == 0, axis=1)):
        raise DegenerateMetricError("connection requested at y = 0", point=(x, y))
    return x, y, batch


def xy_space(n: int, ox: int, oy: int) -> jets.JetSpace:
    return jets.jet_space(((n, ox), (n, oy)))


def spray_jet(model: FinslerModel, x, y, ox: int, oy: int) -> jets.Jet:
    """Jet of G^i over ``xy_space(n, ox, oy)``; ``x``, ``y`` are (B, n).

    G^i = 1/4 g^il (2 d_k g_jl - d_l g_jk) y^j y^k, with g from F^2 at orders
    (ox + 1, oy + 2).
    """
    n = model.dim
    big = xy_space(n, ox + 1, oy + 2)
    X = jets.variables(big, x, first=0)
    Y = jets.variables(big, y, first=n)
    e = model.energy([X[:, i] for i in range(n)], [Y[:, i] for i in range(n)])
    if not isinstance(e, jets.Jet):
        raise ConfigError(f"model {model.name!r} energy does not depend on y")
    de = [e.diff(n + j) for j in range(n)]
    rows = [[None] * n for _ in range(n)]
    for j in range(n):
        for l in range(j, n):
            rows[j][l] = rows[l][j] = de[j].diff(n + l).scale(0.5)
    g = jets.stack([jets.stack(r, axis=-1) for r in rows], axis=-2)  # (B, j, l)
    _check_positive(g.value, x, y)
    dg = jets.stack([g.diff(k) for k in range(n)], axis=1)  # (B, k, j, l)
    t = dg.scale(2.0) - dg.swapaxes(1, 3)
    w = jets.contract_linear(t, 2, y[:, None, None, :], n)  # (B, k, l)
    v = jets.contract_linear(w, 1, y[:, None, :], n)  # (B, l)
    small = xy_space(n, ox, oy)
    ginv = jets.inverse(g.truncate(small))
    return jets.einsum("bil,bl->bi", ginv, v).scale(0.25)


@dataclass
class ConnectionJets:
    """G, Gj, Gjk (and R when requested) as jets over the same (ox, oy) space."""

    space: jets.JetSpace
    G: jets.Jet
    Gj: jets.Jet
    Gjk: jets.Jet
    R: jets.Jet | None = None


def _ydiff(a: jets.Jet, n: int) -> jets.Jet:
    return jets.stack([a.diff(n + j) for j in range(n)], axis=-1)


def _xdiff(a: jets.Jet, n: int) -> jets.Jet:
    return jets.stack([a.diff(k) for k in range(n)], axis=-1)


def connection_jets(model: FinslerModel, x, y, ox: int = 0, oy: int = 0, curvature: bool = True) -> ConnectionJets:
    """Connection (and curvature) jets of orders (ox, oy) at (B, n) points."""
    n = model.dim
    small = xy_space(n, ox, oy)
    G = spray_jet(model, x, y, ox + 1 if curvature else ox, oy + 2)
    Gj = _ydiff(G, n)
    Gjk = _ydiff(Gj, n)
    R = None
    if curvature:
        dGj = _xdiff(Gj, n).truncate(small)  # [b, i, j, k] = d_k G^i_j
        Gj_s = Gj.truncate(small)
        Gjk_s = Gjk.truncate(small)
        t = jets.einsum("bmj,bikm->bijk", Gj_s, Gjk_s)
        R = dGj - dGj.swapaxes(-1, -2) + t - t.swapaxes(-1, -2)
    return ConnectionJets(small, G.truncate(small), Gj.truncate(small), Gjk.truncate(small), R)


@dataclass(frozen=True)
class ConnectionEval:
    G: np.ndarray
    Gj: np.ndarray
    Gjk: np.ndarray
    R: np.ndarray


def connection_eval(model: FinslerModel, x, y) -> ConnectionEval:
    """Numeric spray, connection, Berwald coefficients and curvature."""
    xb, yb, batch = _points(model, x, y)
    c = connection_jets(model, xb, yb, 0, 0)
    n = model.dim
    return ConnectionEval(
        G=c.G.value.reshape(batch + (n,)),
        Gj=c.Gj.value.reshape(batch + (n, n)),
        Gjk=c.Gjk.value.reshape(batch + (n, n, n)),
        R=c.R.value.reshape(batch + (n, n, n)),
    )


def spray_coeffs(model: FinslerModel, x, y) -> np.ndarray:
    xb, yb, batch = _points(model, x, y)
    return spray_jet(model, xb, yb, 0, 0).value.reshape(batch + (model.dim,))


def nonlinear_connection(model: FinslerModel, x, y) -> np.ndarray:
    """G^i_j(x, y) with the batch shape of the broadcast inputs."""
    xb, yb, batch = _points(model, x, y)
    n = model.dim
    G = spray_jet(model, xb, yb, 0, 1)
    return _ydiff(G, n).value.reshape(batch + (n, n))


def berwald_coefficients(model: FinslerModel, x, y):
    """(G^i_j, G^i_jk) at the broadcast inputs."""
    xb, yb, batch = _points(model, x, y)
    n = model.dim
    Gj = _ydiff(spray_jet(model, xb, yb, 0, 2), n)
    Gjk = _ydiff(Gj, n)
    space = xy_space(n, 0, 0)
    return (Gj.truncate(space).value.reshape(batch + (n, n)), Gjk.value.reshape(batch + (n, n, n)))


def curvature_tensor(model: FinslerModel, x, y) -> np.ndarray:
    return connection_eval(model, x, y).R


def curvature_vector(model: FinslerModel, x, y, X, Y) -> np.ndarray:
    """r(X, Y)(y)^i = R^i_jk X^j Y^k."""
    R = curvature_tensor(model, x, y)
    return np.einsum("...ijk,j,k->...i", R, np.asarray(X, float), np.asarray(Y, float))


def horizontal_lift(conn: ConnectionEval, X) -> np.ndarray:
    """Horizontal lift of X in TM coordinates: (X^k, -G^k_i X^i)."""
    Gj = conn.Gj
    X = np.asarray(X, dtype=float)
    Xb = np.broadcast_to(X, Gj.shape[:-1])
    return np.concatenate([Xb, -np.einsum("...ki,...i->...k", Gj, Xb)], axis=-1)


# -- Levi-Civita route for Riemannian models ---------------------------------

def _metric_jet(model: FinslerModel, x, order: int) -> jets.Jet:
    n = model.dim
    space = jets.jet_space(((n, order),))
    X = jets.variables(space, np.asarray(x, float))
    a = model.riemannian_metric([X[..., i] for i in range(n)])
    shape = X.shape[:-1]
    rows = []
    for row in a:
        rows.append(jets.stack([v if isinstance(v, jets.Jet) else jets.constant(space, np.full(shape, float(v)))
                                for v in row], axis=-1))
    return jets.stack(rows, axis=-2)


def christoffel_jet(model: FinslerModel, x, order: int = 0) -> jets.Jet:
    """Levi-Civita symbols Gamma[..., k, i, j] of a Riemannian model, computed
    from the metric coefficients a_ij(x) alone."""
    n = model.dim
    a = _metric_jet(model, x, order + 1)
    da = jets.stack([a.diff(m) for m in range(n)], axis=-3)  # [..., m, i, j] = d_m a_ij
    c = da.coeffs
    s = np.einsum("...ijl->...lij", c) + np.einsum("...jil->...lij", c) - c  # [l, i, j]
    s = jets.Jet(da.space, s)
    ainv = jets.inverse(a.truncate(da.space))
    return jets.einsum("...kl,...lij->...kij", ainv, s).scale(0.5)


def riemann_tensor(model: FinslerModel, x) -> np.ndarray:
    """Classical Riemann tensor Rm[..., i, l, j, k] with
    R(d_j, d_k) d_l = Rm[i, l, j, k] d_i and R(X,Y) = [nabla_X, nabla_Y] - nabla_[X,Y]."""
    n = model.dim
    gam = christoffel_jet(model, x, 1)
    g0 = gam.value
    dg = np.stack([gam.diff(m).value for m in range(n)], axis=-1)  # [i, a, b, m] = d_m Gamma^i_ab
    # d_j Gamma^i_kl - d_k Gamma^i_jl
    lin = np.einsum("...iklj->...iljk", dg) - np.einsum("...ijlk->...iljk", dg)
    quad = np.einsum("...ijm,...mkl->...iljk", g0, g0) - np.einsum("...ikm,...mjl->...iljk", g0, g0)
    return lin + quad
