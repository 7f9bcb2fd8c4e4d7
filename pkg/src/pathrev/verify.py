"""Numerical certification of the reversal identities.

Everything here turns an exact statement about a Markov process into a
residual with an honest error bar: the integration-by-parts bracket, the
short-time product-increment limit of the carre du champ, windowed Nelson
difference quotients, the continuity equation for the current velocity,
detailed balance on graphs, and an energy-distance two-sample test for
law equality of simulated ensembles.

Monte-Carlo residuals pass at |estimate| <= z * stderr + atol with z = 3
and a small absolute floor; the identities themselves are exact, so the
thresholds encode only estimator noise and quadrature bias.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (ConsistencyError, MatrixField, ParameterError, PathEnsemble,
                   SupportError, TimeGrid, VectorField, path_rng)
from .density import DensityFlow
from .models import GraphWalkSpec
from .reversal import ReversedWalk

Z_DEFAULT = 3.0
ATOL_DEFAULT = 1e-3
SMALL_SAMPLE = 100


@dataclass(frozen=True)
class TestFunction:
    """Smooth scalar observable with gradient and Hessian, batched over rows.

    fn maps (n, d) -> (n,); grad -> (n, d); hess -> (n, d, d).  Bounded
    derivatives on the region of interest are the caller's responsibility.
    Products of test functions are test functions; build them with `*`.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    dim: int
    name: str = "u"

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(X)), dtype=np.float64)

    def laplacian(self, a: MatrixField, t: float, X: np.ndarray) -> np.ndarray:
        """Delta_a u = sum_ij a_ij d_i d_j u, evaluated per row."""
        X = np.atleast_2d(X)
        H = np.asarray(self.hess(X), dtype=np.float64)
        if a.is_constant:
            return np.einsum("ij,nij->n", a.constant_matrix, H)
        return np.array([np.trace(a.at(t, x) @ h) for x, h in zip(X, H)])

    def __mul__(self, other: "TestFunction") -> "TestFunction":
        if self.dim != other.dim:
            raise ParameterError("dimension mismatch in product")
        u, v = self, other

        def fn(X):
            return u.fn(X) * v.fn(X)

        def grad(X):
            return u.fn(X)[:, None] * v.grad(X) + v.fn(X)[:, None] * u.grad(X)

        def hess(X):
            gu, gv = u.grad(X), v.grad(X)
            cross = gu[:, :, None] * gv[:, None, :]
            return (u.fn(X)[:, None, None] * v.hess(X)
                    + v.fn(X)[:, None, None] * u.hess(X)
                    + cross + cross.transpose(0, 2, 1))

        return TestFunction(fn, grad, hess, u.dim, name=f"({u.name})*({v.name})")


def coordinate_function(dim: int = 1, index: int = 0) -> TestFunction:
    """u(x) = x_i."""
    e = np.zeros(dim)
    e[index] = 1.0
    return TestFunction(
        lambda X: X[:, index].copy(),
        lambda X: np.broadcast_to(e, X.shape).copy(),
        lambda X: np.zeros((X.shape[0], dim, dim)),
        dim, name=f"x{index}")


def square_function(dim: int = 1, index: int = 0) -> TestFunction:
    """u(x) = x_i^2."""
    H = np.zeros((dim, dim))
    H[index, index] = 2.0

    def grad(X):
        out = np.zeros_like(X)
        out[:, index] = 2.0 * X[:, index]
        return out

    return TestFunction(
        lambda X: X[:, index] ** 2,
        grad,
        lambda X: np.broadcast_to(H, (X.shape[0], dim, dim)).copy(),
        dim, name=f"x{index}^2")


def windowed_cubic(dim: int = 1, index: int = 0, width: float = 4.0) -> TestFunction:
    """u(x) = x_i^3 exp(-x_i^2 / width): a cubic tamed by a Gaussian window,
    bounded with bounded derivatives on all of R."""
    if width <= 0:
        raise ParameterError("width must be positive")
    w = float(width)

    def parts(X):
        x = X[:, index]
        return x, np.exp(-x ** 2 / w)

    def fn(X):
        x, env = parts(X)
        return x ** 3 * env

    def grad(X):
        x, env = parts(X)
        out = np.zeros_like(X)
        out[:, index] = (3.0 * x ** 2 - 2.0 * x ** 4 / w) * env
        return out

    def hess(X):
        x, env = parts(X)
        out = np.zeros((X.shape[0], dim, dim))
        out[:, index, index] = (6.0 * x - 14.0 * x ** 3 / w + 4.0 * x ** 5 / w ** 2) * env
        return out

    return TestFunction(fn, grad, hess, dim, name=f"x{index}^3*bump")


def constant_function(dim: int = 1, value: float = 1.0) -> TestFunction:
    return TestFunction(
        lambda X: np.full(X.shape[0], float(value)),
        lambda X: np.zeros_like(X),
        lambda X: np.zeros((X.shape[0], dim, dim)),
        dim, name=str(value))


@dataclass(frozen=True)
class ResidualReport:
    """A residual that should be zero, with its Monte-Carlo error bar.

    passed is |estimate| <= z * mc_stderr + atol.  Exact (non-MC) checks set
    mc_stderr = 0 and z = 0 so only atol matters.
    """

    estimate: float
    mc_stderr: float
    n_samples: int
    passed: bool
    z: float = Z_DEFAULT
    atol: float = ATOL_DEFAULT
    note: str = ""

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "mc_stderr": self.mc_stderr,
                "n_samples": self.n_samples, "passed": bool(self.passed),
                "z": self.z, "atol": self.atol, "note": self.note}


def _report(vals: np.ndarray, z: float, atol: float, note: str = "") -> ResidualReport:
    n = vals.size
    if n == 0:
        raise ParameterError("empty sample")
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    if n < SMALL_SAMPLE:
        note = (note + "; " if note else "") + f"small sample (n={n})"
    return ResidualReport(est, se, n, abs(est) <= z * se + atol, z, atol, note)


def ibp_residual(v_fwd: VectorField, v_bwd: VectorField, a: MatrixField,
                 X: np.ndarray, t: float, u: TestFunction, v: TestFunction,
                 z: float = Z_DEFAULT, atol: float = ATOL_DEFAULT) -> ResidualReport:
    """Integration-by-parts bracket at one time slice.

    With forward and backward generators L+ u = v_fwd . grad u + Delta_a u / 2
    and L- u = v_bwd . grad u + Delta_a u / 2, and carre du champ
    Gamma(u, v) = grad u . a grad v, the mean over X_t ~ P_t of

        (L+ u + L- u) v + Gamma(u, v)

    vanishes.  X holds the slice samples; the report carries the MC mean.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    gu = np.asarray(u.grad(X), dtype=np.float64)
    gv = np.asarray(v.grad(X), dtype=np.float64)
    drift_part = ((v_fwd(t, X) + v_bwd(t, X)) * gu).sum(axis=1)
    lap = u.laplacian(a, t, X)
    gamma = (gu * a.apply(t, X, gv)).sum(axis=1)
    bracket = (drift_part + lap) * v(X) + gamma
    return _report(bracket, z, atol)


def graph_ibp_residual(spec: GraphWalkSpec, reversed_walk: ReversedWalk,
                       p: np.ndarray, t: float, u: np.ndarray, v: np.ndarray,
                       atol: float = 1e-12) -> ResidualReport:
    """Exact graph analogue of ibp_residual: no sampling, a finite sum.

    sum_x p(x) [ (L+ u + L- u)(x) v(x) + Gamma(u, v)(x) ] with the graph
    carre du champ Gamma(u, v)(x) = sum_y (u(y)-u(x))(v(y)-v(x)) j(t, x; y).
    The reversed intensities must be defined on every state p charges.
    """
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = spec.n_states
    if p.shape != (n,) or u.shape != (n,) or v.shape != (n,):
        raise ParameterError("p, u, v must be state vectors")
    J = spec.intensity(t)
    s = reversed_walk.T - t
    Jb = reversed_walk.intensity(s)
    mask = reversed_walk.defined_mask(s)
    charged = p > 0
    if (~mask[charged]).any():
        bad = np.nonzero(charged & ~mask.all(axis=1))[0]
        raise ConsistencyError(f"reversed intensity undefined on charged states {bad.tolist()}")
    Jb = np.where(mask, Jb, 0.0)

    du = u[None, :] - u[:, None]
    dv = v[None, :] - v[:, None]
    Lf = (J * du).sum(axis=1)
    Lb = (Jb * du).sum(axis=1)
    gamma = (J * du * dv).sum(axis=1)
    est = float(p @ ((Lf + Lb) * v + gamma))
    return ResidualReport(est, 0.0, n, abs(est) <= atol, z=0.0, atol=atol)


def _node_pair(grid: TimeGrid, t: float, h: float) -> tuple[int, int, float]:
    """Indices of t and t+h on the grid; h must land on a node."""
    k0 = grid.index_of(t)
    k1 = grid.index_of(t + h)
    if k1 <= k0:
        raise ParameterError(f"h={h} too small for the grid (dt={grid.dt})")
    for tt, kk in ((t, k0), (t + h, k1)):
        if abs(grid.node(kk) - tt) > 1e-9 * max(1.0, grid.T):
            raise ParameterError(f"time {tt} is not a grid node")
    return k0, k1, grid.node(k1) - grid.node(k0)


def carre_du_champ_estimate(e: PathEnsemble, u: TestFunction, v: TestFunction,
                            t: float, h: float, expected: float,
                            z: float = Z_DEFAULT, atol: float = ATOL_DEFAULT) -> ResidualReport:
    """Short-time product-increment estimate of E Gamma(u, v) at time t.

    mean[ (u(X_{t+h}) - u(X_t)) (v(X_{t+h}) - v(X_t)) ] / h converges to
    E Gamma(u, v)(X_t) linearly in h; the report holds estimate - expected,
    so the bias floor is O(h) and pass needs atol sized accordingly.
    """
    k0, k1, dt = _node_pair(e.grid, t, h)
    X0 = e.paths[:, k0, :]
    X1 = e.paths[:, k1, :]
    vals = (u(X1) - u(X0)) * (v(X1) - v(X0)) / dt
    return _report(vals - expected, z, atol)


def nelson_forward_derivative(e: PathEnsemble, u: TestFunction, t: float,
                              x0, window: float, h_list: Sequence[float]) -> float:
    """Windowed forward difference quotient of E[u(X)|X_t near x0].

    Averages (u(X_{t+h}) - u(X_t)) / h over paths with |X_t - x0| <= window,
    then Richardson-extrapolates the two smallest h to kill the O(h) term.
    A pointwise estimator of the forward generator applied to u, not a limit.
    """
    if window <= 0:
        raise ParameterError("window must be positive")
    hs = sorted(float(h) for h in h_list)
    if len(hs) < 2:
        raise ParameterError("need at least two step sizes")
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    k0 = e.grid.index_of(t)
    X0 = e.paths[:, k0, :]
    sel = np.linalg.norm(X0 - x0[None, :], axis=1) <= window
    if not sel.any():
        raise SupportError(f"no paths within {window} of {x0} at t={t}")
    u0 = u(X0[sel])

    def quotient(h: float) -> tuple[float, float]:
        _, k1, dt = _node_pair(e.grid, t, h)
        return float((u(e.paths[sel, k1, :]) - u0).mean() / dt), dt

    d1, h1 = quotient(hs[0])
    d2, h2 = quotient(hs[1])
    return (h2 * d1 - h1 * d2) / (h2 - h1)


@dataclass(frozen=True)
class ContinuityReport:
    sup_residual: float
    l1_residual: float
    n_used: int
    n_skipped: int

    def to_dict(self) -> dict:
        return {"sup_residual": self.sup_residual, "l1_residual": self.l1_residual,
                "n_used": self.n_used, "n_skipped": self.n_skipped}


def _stencil(f, center: float, delta: float, order: int) -> float:
    if order == 2:
        return (f(center + delta) - f(center - delta)) / (2.0 * delta)
    return (-f(center + 2 * delta) + 8.0 * f(center + delta)
            - 8.0 * f(center - delta) + f(center - 2 * delta)) / (12.0 * delta)


def continuity_residual(flow: DensityFlow, v_cu: VectorField, grid: TimeGrid,
                        box, times: Sequence[float] | None = None,
                        n_per_dim: int = 9, dt_stencil: float = 1e-4,
                        dx_stencil: float = 1e-4, order: int = 2) -> ContinuityReport:
    """Residual of d_t rho + div(rho v_cu) = 0 on a probe mesh.

    box is (lo, hi) per coordinate; probes below the density's support floor
    are skipped.  order selects the central stencil (2 or 4); with exact
    flows the residual is limited only by stencil truncation error.
    """
    if order not in (2, 4):
        raise ParameterError("order must be 2 or 4")
    d = flow.dim
    lo = np.broadcast_to(np.asarray(box[0], dtype=np.float64), (d,))
    hi = np.broadcast_to(np.asarray(box[1], dtype=np.float64), (d,))
    if (hi <= lo).any():
        raise ParameterError("box upper bounds must exceed lower bounds")
    if times is None:
        times = (0.25 * grid.T, 0.5 * grid.T, 0.75 * grid.T)
    reach = (2 if order == 4 else 1) * dt_stencil
    for t in times:
        if t - reach < 0.0 or t + reach > grid.T:
            raise ParameterError(f"probe time {t} too close to the interval ends")

    axes = [np.linspace(lo[i], hi[i], n_per_dim) for i in range(d)]
    mesh = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)

    residuals = []
    n_skipped = 0
    for t in times:
        floor = flow.support_threshold(t)
        for x in mesh:
            if flow.pdf(t, x) < floor:
                n_skipped += 1
                continue
            drho_dt = _stencil(lambda s: float(flow.pdf(s, x)), t, dt_stencil, order)
            div = 0.0
            for i in range(d):
                def flux(xi: float, i=i) -> float:
                    y = x.copy()
                    y[i] = xi
                    return float(flow.pdf(t, y) * v_cu(t, y[None, :])[0, i])
                div += _stencil(flux, x[i], dx_stencil, order)
            residuals.append(abs(drho_dt + div))
    if not residuals:
        raise ParameterError("every probe fell below the support floor")
    r = np.array(residuals)
    return ContinuityReport(float(r.max()), float(r.mean()), r.size, n_skipped)


def detailed_balance_residual(m, spec: GraphWalkSpec, t: float = 0.0) -> float:
    """max over ordered pairs of |m(x) j(t,x;y) - m(y) j(t,y;x)|.

    m is any positive measure on the states (not necessarily normalized);
    zero means the walk is reversible for m at time t.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (spec.n_states,) or (m <= 0).any():
        raise ParameterError("m must be a positive state vector")
    F = m[:, None] * spec.intensity(t)
    return float(np.abs(F - F.T).max())


@dataclass(frozen=True)
class EnergyTestResult:
    statistic: float
    p_value: float
    n_perm: int
    n_a: int
    n_b: int
    note: str = ""

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value,
                "n_perm": self.n_perm, "n_a": self.n_a, "n_b": self.n_b,
                "note": self.note}


def _pairsum_sorted(z: np.ndarray) -> float:
    """sum_{i<j} (z_j - z_i) for ascending z, via rank weights."""
    m = z.size
    return float(((2.0 * np.arange(m) - m + 1.0) * z).sum())


def two_sample_energy(A: np.ndarray, B: np.ndarray, n_perm: int = 199,
                      seed: int = 0) -> EnergyTestResult:
    """Energy-distance two-sample test with a permutation null.

    Statistic 2 E|a-b| - E|a-a'| - E|b-b'| over the empirical laws (V-form,
    diagonal included, hence nonnegative and exactly 0 for identical
    samples).  One dimension runs in O(N log N) per permutation through
    sorted prefix sums; higher dimensions build the pooled distance matrix
    once, so keep pooled sizes moderate there.  Permutation streams are
    seeded per permutation index, making the p-value reproducible.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ParameterError("A and B must be sample matrices with equal dim")
    n, m = A.shape[0], B.shape[0]
    if n_perm < 1:
        raise ParameterError("n_perm must be at least 1")
    note = ""
    if min(n, m) < 50:
        note = f"small sample (n={n}, m={m})"
    N = n + m
    identical = n == m and np.array_equal(A, B)

    if A.shape[1] == 1:
        order = np.argsort(np.concatenate([A[:, 0], B[:, 0]]), kind="stable")
        z = np.concatenate([A[:, 0], B[:, 0]])[order]
        sel0 = order < n
        U_pool = _pairsum_sorted(z)

        def stat_from(sel_a: np.ndarray) -> float:
            ua = _pairsum_sorted(z[sel_a])
            ub = _pairsum_sorted(z[~sel_a])
            cross = U_pool - ua - ub
            return 2.0 * cross / (n * m) - 2.0 * ua / (n * n) - 2.0 * ub / (m * m)
    else:
        from scipy.spatial.distance import cdist
        D = cdist(np.concatenate([A, B], axis=0), np.concatenate([A, B], axis=0))
        sel0 = np.zeros(N, dtype=bool)
        sel0[:n] = True

        def stat_from(sel_a: np.ndarray) -> float:
            sa = sel_a.astype(np.float64)
            sb = 1.0 - sa
            Dsa = D @ sa
            s_aa = float(sa @ Dsa)
            s_bb = float(sb @ (D @ sb))
            s_ab = float(sb @ Dsa)
            return 2.0 * s_ab / (n * m) - s_aa / (n * n) - s_bb / (m * m)

    obs = 0.0 if identical else stat_from(sel0)
    count = 0
    for i in range(n_perm):
        rng = path_rng(seed, i)
        sel = np.zeros(N, dtype=bool)
        sel[rng.permutation(N)[:n]] = True
        if stat_from(sel) >= obs:
            count += 1

    p = (count + 1) / (n_perm + 1)
    return EnergyTestResult(float(obs), float(p), n_perm, n, m, note)
