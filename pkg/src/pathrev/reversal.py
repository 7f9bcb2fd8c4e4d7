"""Time reversal of diffusions and jump walks.

For a diffusion with forward drift b, diffusion matrix a and marginal
densities mu_t, the reversed process solves an SDE with the same a and drift

    b_rev(t, x) = -b(T - t, x) + div a(T - t, x) + a(T - t, x) grad log mu_{T-t}(x),

where (div a)_i = sum_j d_j a_ij.  The same data split symmetrically gives
the current and osmotic velocities: with v_fwd = b and v_bwd the backward
drift at original time (v_bwd(t, x) = b_rev(T - t, x)),

    v_cu = (v_fwd - v_bwd) / 2,   v_os = (v_fwd + v_bwd) / 2.

For a walk with marginals p_t the reversed jump intensities satisfy
p_t(x) j_fwd(t, x; y) = p_t(y) j_bwd(t, y; x) and are packaged at reversed
time s = T - t.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (ConsistencyError, MatrixField, ParameterError, VectorField)
from .density import DensityFlow
from .models import GraphWalkSpec, KolmogorovSpec


class BackwardDriftField:
    """Backward drift at original time: -b + div a + a score.

    Score values below the density's support floor are replaced by zero and
    counted in floor_hits.  Output magnitudes above b_max are rescaled and
    counted in cap_hits; both counters are diagnostics, not errors.
    """

    def __init__(self, b: VectorField, a: MatrixField, div_a: VectorField,
                 density: DensityFlow, b_max: float = 1e6):
        if b.dim != density.dim or a.dim != density.dim:
            raise ParameterError("drift, a and density disagree on dimension")
        if not (b_max > 0):
            raise ParameterError(f"b_max must be positive, got {b_max}")
        self.b, self.a, self.div_a, self.density = b, a, div_a, density
        self.b_max = float(b_max)
        self.dim = density.dim
        self.floor_hits = 0
        self.cap_hits = 0

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        X = np.asarray(x, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        sc = np.atleast_2d(self.density.score(t, X))
        ok = self.density.in_support(t, X)
        if not ok.all():
            self.floor_hits += int((~ok).sum())
            sc = np.where(ok[:, None], sc, 0.0)
        out = -self.b(t, X) + self.div_a(t, X) + self.a.apply(t, X, sc)
        norms = np.linalg.norm(out, axis=1)
        over = norms > self.b_max
        if over.any():
            self.cap_hits += int(over.sum())
            out[over] *= (self.b_max / norms[over])[:, None]
        return out[0] if single else out


class ReversedDrift:
    """Drift of the reversed process as a field in reversed time.

    Evaluation at reversed time t delegates to the backward drift at original
    time T - t.  An explicit Euler run over [0, T] only ever queries reversed
    times up to T - dt, so the original time 0 slice is never touched.
    """

    def __init__(self, backward: BackwardDriftField, T: float):
        if not (T > 0):
            raise ParameterError(f"horizon must be positive, got {T}")
        self.backward = backward
        self.T = float(T)
        self.dim = backward.dim

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        if not (-1e-12 <= t <= self.T * (1 + 1e-12)):
            raise ParameterError(f"reversed time {t} outside [0, {self.T}]")
        return self.backward(self.T - t, x)

    @property
    def floor_hits(self) -> int:
        return self.backward.floor_hits

    @property
    def cap_hits(self) -> int:
        return self.backward.cap_hits


def backward_velocity(b: VectorField, a: MatrixField, div_a: VectorField,
                      density: DensityFlow, b_max: float = 1e6) -> BackwardDriftField:
    return BackwardDriftField(b, a, div_a, density, b_max)


def reversed_drift(b: VectorField, a: MatrixField, div_a: VectorField,
                   density: DensityFlow, T: float, b_max: float = 1e6) -> ReversedDrift:
    """Drift of the time-reversed diffusion on [0, T]."""
    return ReversedDrift(BackwardDriftField(b, a, div_a, density, b_max), T)


@dataclass(frozen=True)
class VelocityFields:
    """Forward, backward, current and osmotic velocities of one process.

    The linear relations v_fwd = v_cu + v_os and v_bwd = -v_cu + v_os hold by
    construction; consistency_residual re-evaluates them at query points.
    """

    v_fwd: VectorField
    v_bwd: VectorField
    v_cu: VectorField
    v_os: VectorField

    def consistency_residual(self, t: float, X: np.ndarray) -> float:
        f, b = self.v_fwd(t, X), self.v_bwd(t, X)
        cu, os_ = self.v_cu(t, X), self.v_os(t, X)
        r1 = np.abs(f - (cu + os_)).max()
        r2 = np.abs(b - (os_ - cu)).max()
        return float(max(r1, r2))


def velocity_decomposition(v_fwd: VectorField, v_bwd: VectorField) -> VelocityFields:
    if v_fwd.dim != v_bwd.dim:
        raise ParameterError("velocity fields disagree on dimension")
    d = v_fwd.dim
    cu = VectorField(lambda t, X: 0.5 * (v_fwd(t, X) - v_bwd(t, X)), d)
    os_ = VectorField(lambda t, X: 0.5 * (v_fwd(t, X) + v_bwd(t, X)), d)
    return VelocityFields(v_fwd, v_bwd, cu, os_)


@dataclass(frozen=True)
class MomentumFields:
    """Momenta of a process relative to a reversible reference.

    beta_dir solves a beta_dir = v_dir - v_ref for dir in {fwd, bwd}, and
    beta_cu, beta_os are the half-difference and half-sum.  The squared-norm
    identity |b_f|_a^2/2 + |b_b|_a^2/2 = |b_cu|_a^2 + |b_os|_a^2 is the
    parallelogram law; parallelogram_residual evaluates it pointwise.
    """

    beta_fwd: VectorField
    beta_bwd: VectorField
    beta_cu: VectorField
    beta_os: VectorField
    a: MatrixField

    def parallelogram_residual(self, t: float, X: np.ndarray) -> float:
        X = np.atleast_2d(X)
        qf = self.a.quad(t, X, np.atleast_2d(self.beta_fwd(t, X)))
        qb = self.a.quad(t, X, np.atleast_2d(self.beta_bwd(t, X)))
        qc = self.a.quad(t, X, np.atleast_2d(self.beta_cu(t, X)))
        qo = self.a.quad(t, X, np.atleast_2d(self.beta_os(t, X)))
        return float(np.abs(0.5 * qf + 0.5 * qb - qc - qo).max())


def momentum_fields(v_fwd: VectorField, v_bwd: VectorField,
                    ref: KolmogorovSpec) -> MomentumFields:
    """Momenta of (v_fwd, v_bwd) relative to the reference generator drift."""
    d = ref.dim
    if v_fwd.dim != d or v_bwd.dim != d:
        raise ParameterError("velocities and reference disagree on dimension")

    def beta(v):
        return VectorField(lambda t, X: ref.a.solve(t, X, v(t, X) - ref.drift(t, X)), d)

    bf, bb = beta(v_fwd), beta(v_bwd)
    cu = VectorField(lambda t, X: 0.5 * (bf(t, X) - bb(t, X)), d)
    os_ = VectorField(lambda t, X: 0.5 * (bf(t, X) + bb(t, X)), d)
    return MomentumFields(bf, bb, cu, os_, ref.a)


@dataclass(frozen=True)
class OsmoticResidual:
    max_abs: float
    weighted_l2: float
    n_used: int
    n_skipped: int


def osmotic_residual(density: DensityFlow, ref: KolmogorovSpec,
                     momentum: MomentumFields, times, X: np.ndarray) -> OsmoticResidual:
    """Residual of the osmotic identity beta_os = grad log sqrt(rho).

    rho_t = d mu_t / dm is the density of the process law against the
    reversible reference law, so grad log sqrt(rho) = (score_mu - score_m)/2.
    Probes below the density's support floor are skipped.  Reports the sup
    norm and the mu-weighted L2 norm over the used probes.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sup = 0.0
    num = 0.0
    wsum = 0.0
    used = skipped = 0
    for t in np.atleast_1d(times):
        t = float(t)
        ok = density.in_support(t, X)
        if not ok.any():
            skipped += X.shape[0]
            continue
        Xs = X[ok]
        lhs = np.atleast_2d(momentum.beta_os(t, Xs))
        rhs = 0.5 * (np.atleast_2d(density.score(t, Xs)) - np.atleast_2d(ref.m_score(Xs)))
        r = np.linalg.norm(lhs - rhs, axis=1)
        w = np.atleast_1d(density.pdf(t, Xs))
        sup = max(sup, float(r.max()))
        num += float((w * r ** 2).sum())
        wsum += float(w.sum())
        used += Xs.shape[0]
        skipped += int((~ok).sum())
    if used == 0:
        raise ParameterError("all probes fell below the support floor")
    return OsmoticResidual(sup, float(np.sqrt(num / wsum)), used, skipped)


@dataclass(frozen=True)
class ReversedWalk:
    """Reversed jump intensities packaged at reversed time s = T - t.

    intensity(s)[u, v] is the reversed walk's rate from u to v.  Entries that
    are 0/0 (no mass and no flow) are undefined and stored as NaN with
    defined_mask(s) false; they are flagged-absent, not zero.  p_init is the
    terminal marginal of the forward walk, i.e. the reversed initial law.
    """

    n_states: int
    adjacency: np.ndarray
    T: float
    _intensity_fn: Callable[[float], tuple[np.ndarray, np.ndarray]]
    p_init: np.ndarray

    def intensity(self, s: float) -> np.ndarray:
        J, _ = self._intensity_fn(float(s))
        return J

    def defined_mask(self, s: float) -> np.ndarray:
        _, mask = self._intensity_fn(float(s))
        return mask

    def backward_intensity(self, t: float) -> np.ndarray:
        """Backward intensities indexed by original time t."""
        return self.intensity(self.T - t)

    def as_walk_spec(self, rate_bound: float) -> GraphWalkSpec:
        """Materialize as a simulatable walk; requires every edge defined."""
        from .models import graph_walk

        def fn(s):
            J, mask = self._intensity_fn(float(s))
            if not mask[self.adjacency].all():
                raise ConsistencyError("reversed intensity undefined on a charged edge")
            return J

        return graph_walk(self.adjacency, fn, self.p_init, rate_bound=rate_bound,
                          tag="reversed-walk")


def reversed_jump_intensities(spec: GraphWalkSpec, marginals: Callable[[float], np.ndarray],
                              T: float) -> ReversedWalk:
    """Reverse a walk using its marginal flow.

    marginals(t) must return the law p_t of the forward walk.  A state y with
    p_t(y) = 0 but incoming flow p_t(x) j(t, x; y) > 0 is inconsistent and
    raises; a state with neither mass nor flow yields undefined (NaN) rows.
    """
    if not (T > 0):
        raise ParameterError(f"horizon must be positive, got {T}")
    A = spec.adjacency

    def at_reversed(s: float) -> tuple[np.ndarray, np.ndarray]:
        if not (-1e-12 <= s <= T * (1 + 1e-12)):
            raise ParameterError(f"reversed time {s} outside [0, {T}]")
        t = min(max(T - s, 0.0), T)
        p = np.asarray(marginals(t), dtype=np.float64)
        J = spec.intensity(t)
        flow = p[:, None] * J  # flow[x, y] = p(x) j(x, y)
        dead = p == 0.0
        bad = dead & (flow.sum(axis=0) > 0)
        if bad.any():
            y = int(np.nonzero(bad)[0][0])
            raise ConsistencyError(
                f"marginal mass is zero at state {y}, t={t}, but flow into it is positive")
        out = np.zeros_like(J)
        mask = np.ones_like(A, dtype=bool)
        alive = ~dead
        out[alive] = flow.T[alive] / p[alive, None]
        for u in np.nonzero(dead)[0]:
            # no mass and no flow: the reversed rate out of u is 0/0
            out[u, A[u]] = np.nan
            mask[u, A[u]] = False
        return out, mask

    p_T = np.asarray(marginals(T), dtype=np.float64)
    return ReversedWalk(spec.n_states, A, float(T), at_reversed, p_T)
