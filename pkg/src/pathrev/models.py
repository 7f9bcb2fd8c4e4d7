"""Model builders: reversible reference diffusions, Gaussian marginal flows,
generic diffusion specifications and finite-graph walks.

The shipped oracles are deliberately simple (constant diffusion matrix,
linear drift, Gaussian marginals) so that every downstream quantity has a
closed form to test against.  Spatially varying coefficients are supported
through the field abstractions but ship without oracles.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .core import (ConfigError, ConsistencyError, MatrixField, NumericError,
                   ParameterError, VectorField, _freeze, psd_sqrt)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Gaussian:
    """A Gaussian law N(mean, cov).  cov may be PSD (degenerate allowed for
    sampling; density evaluation requires SPD)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        C = np.asarray(self.cov, dtype=np.float64)
        if C.ndim == 0:
            C = C.reshape(1, 1)
        if C.shape != (m.size, m.size):
            raise ParameterError(f"cov shape {C.shape} incompatible with mean size {m.size}")
        if not np.allclose(C, C.T, atol=1e-12):
            raise ParameterError("cov must be symmetric")
        object.__setattr__(self, "mean", _freeze(m))
        object.__setattr__(self, "cov", _freeze(0.5 * (C + C.T)))

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def factor(self) -> np.ndarray:
        return psd_sqrt(self.cov)

    @cached_property
    def _inv(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.cov)
        except np.linalg.LinAlgError:
            raise NumericError("covariance is singular; density undefined") from None

    @cached_property
    def _logdet(self) -> float:
        sign, val = np.linalg.slogdet(self.cov)
        if sign <= 0:
            raise NumericError("covariance is singular; density undefined")
        return float(val)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        D = X - self.mean
        q = np.einsum("ni,ij,nj->n", D, self._inv, D)
        out = -0.5 * (q + self.dim * _LOG_2PI + self._logdet)
        return out[0] if np.ndim(x) == 1 else out

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def score(self, x: np.ndarray) -> np.ndarray:
        """Gradient of log density: -cov^{-1} (x - mean)."""
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = -(X - self.mean) @ self._inv.T
        return out[0] if np.ndim(x) == 1 else out

    def max_pdf(self) -> float:
        return float(np.exp(-0.5 * (self.dim * _LOG_2PI + self._logdet)))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        Z = rng.standard_normal((n, self.dim))
        return self.mean + Z @ self.factor.T


@dataclass(frozen=True)
class GaussianFlow:
    """Marginal flow t -> N(mean(t), cov(t)) on [0, T]."""

    mean_fn: Callable[[float], np.ndarray]
    cov_fn: Callable[[float], np.ndarray]
    dim: int
    tag: str = ""

    def at(self, t: float) -> Gaussian:
        return Gaussian(self.mean_fn(t), self.cov_fn(t))

    def mean(self, t: float) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.mean_fn(t), dtype=np.float64))

    def cov(self, t: float) -> np.ndarray:
        C = np.asarray(self.cov_fn(t), dtype=np.float64)
        return C.reshape(1, 1) if C.ndim == 0 else C

    def pdf(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.at(t).pdf(x)

    def score(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.at(t).score(x)

    def validate_spd(self, times) -> None:
        for t in np.atleast_1d(times):
            C = self.cov(float(t))
            try:
                np.linalg.cholesky(C)
            except np.linalg.LinAlgError:
                raise NumericError(f"flow covariance not SPD at t={t}") from None


def reverse_flow(flow: GaussianFlow, T: float) -> GaussianFlow:
    """Marginal flow of the time-reversed process: t -> flow at T - t."""
    return GaussianFlow(lambda t: flow.mean_fn(T - t), lambda t: flow.cov_fn(T - t),
                        flow.dim, flow.tag + "~rev")


@dataclass(frozen=True)
class KolmogorovSpec:
    """Reversible reference diffusion with generator drift (div a - a grad U)/2.

    The reversible law has density proportional to exp(-U); log_norm holds the
    normalizing constant so m_logpdf is an actual probability density.  When
    the law is Gaussian it is also stored as m for closed-form entropies.
    """

    dim: int
    potential: Callable[[np.ndarray], np.ndarray]
    grad_potential: Callable[[np.ndarray], np.ndarray]
    a: MatrixField
    div_a: VectorField
    drift: VectorField
    log_norm: float
    m: Gaussian | None = None
    tag: str = ""

    def m_logpdf(self, x: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = -np.asarray(self.potential(X), dtype=np.float64) + self.log_norm
        return out[0] if np.ndim(x) == 1 else out

    def m_pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.m_logpdf(x))

    def m_score(self, x: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = -np.asarray(self.grad_potential(X), dtype=np.float64)
        return out[0] if np.ndim(x) == 1 else out

    def check_growth(self, radius: float, bound: float, n_points: int = 4096,
                     seed: int = 0) -> tuple[bool, float]:
        """Sampled check of x . drift(x) + tr a(x) <= bound (1 + |x|^2).

        Sampling a box is evidence, not proof; the caller chooses the radius
        and the constant.  Returns (ok, worst ratio).
        """
        rng = np.random.default_rng(seed)
        X = rng.uniform(-radius, radius, size=(n_points, self.dim))
        v = self.drift(0.0, X)
        tra = np.array([np.trace(self.a.at(0.0, x)) for x in X]) \
            if not self.a.is_constant else np.full(n_points, np.trace(self.a.constant_matrix))
        ratio = ((X * v).sum(axis=1) + tra) / (1.0 + (X ** 2).sum(axis=1))
        worst = float(ratio.max())
        return worst <= bound, worst


def kolmogorov_spec(dim: int, potential, grad_potential, a: MatrixField,
                    div_a: VectorField | None = None, log_norm: float = 0.0,
                    m: Gaussian | None = None, tag: str = "") -> KolmogorovSpec:
    """Assemble a reversible reference; the drift is derived, not supplied."""
    if div_a is None:
        if not a.is_constant:
            raise ParameterError("div_a must be supplied for non-constant a")
        div_a = VectorField.zero(dim)

    def drift_fn(t, X):
        g = np.asarray(grad_potential(X), dtype=np.float64)
        return 0.5 * (div_a(t, X) - a.apply(t, X, g))

    return KolmogorovSpec(dim, potential, grad_potential, a, div_a,
                          VectorField(drift_fn, dim), float(log_norm), m, tag)


def ou_reference(dim: int = 1) -> tuple[KolmogorovSpec, GaussianFlow]:
    """The standard reference: a = Id, U(x) = |x|^2 + (dim/2) log pi.

    Generator drift is -x and the reversible law is N(0, Id/2), returned both
    inside the spec and as a constant-in-time flow.
    """
    const = 0.5 * dim * math.log(math.pi)

    def potential(X):
        return (X ** 2).sum(axis=1) + const

    def grad_potential(X):
        return 2.0 * X

    m = Gaussian(np.zeros(dim), 0.5 * np.eye(dim))
    spec = kolmogorov_spec(dim, potential, grad_potential, MatrixField.identity(dim),
                           log_norm=0.0, m=m, tag="ou-ref")
    flow = GaussianFlow(lambda t: m.mean, lambda t: m.cov, dim, tag="ou-stationary")
    return spec, flow


def ou_marginal_flow(init_mean, init_cov) -> GaussianFlow:
    """Marginal flow of dX = -X dt + dB started from N(init_mean, init_cov).

    mean(t) = exp(-t) mean_0,  cov(t) = exp(-2t) cov_0 + (1 - exp(-2t)) Id/2.
    """
    init = Gaussian(init_mean, init_cov)
    d = init.dim
    half = 0.5 * np.eye(d)

    def mean_fn(t):
        return math.exp(-t) * init.mean

    def cov_fn(t):
        e = math.exp(-2.0 * t)
        return e * init.cov + (1.0 - e) * half

    flow = GaussianFlow(mean_fn, cov_fn, d, tag="ou")
    flow.validate_spd([0.0])
    return flow


def bm_flow(init_cov, init_mean=None) -> GaussianFlow:
    """Marginal flow of Brownian motion: mean constant, cov(t) = cov_0 + t Id."""
    C0 = np.asarray(init_cov, dtype=np.float64)
    if C0.ndim == 0:
        C0 = C0.reshape(1, 1)
    d = C0.shape[0]
    mu = np.zeros(d) if init_mean is None else np.atleast_1d(np.asarray(init_mean, float))
    init = Gaussian(mu, C0)
    eye = np.eye(d)
    flow = GaussianFlow(lambda t: init.mean, lambda t: init.cov + t * eye, d, tag="bm")
    flow.validate_spd([0.0])
    return flow


@dataclass(frozen=True)
class DiffusionSpec:
    """What the path simulator needs: drift b, diffusion matrix a = sigma sigma^T,
    a factor sigma, and an initial law."""

    dim: int
    drift: VectorField
    a: MatrixField
    sigma: MatrixField
    init: Gaussian
    tag: str = ""

    def validate_sigma(self, points: np.ndarray, t: float = 0.0, tol: float = 1e-12) -> None:
        for x in np.atleast_2d(points):
            S = self.sigma.at(t, x)
            A = self.a.at(t, x)
            if np.abs(S @ S.T - A).max() > tol * max(1.0, np.abs(A).max()):
                raise ConsistencyError(f"sigma sigma^T != a at t={t}, x={x}")


def diffusion_spec(drift: VectorField, a: MatrixField, init: Gaussian,
                   sigma: MatrixField | None = None, tag: str = "") -> DiffusionSpec:
    dim = drift.dim
    if init.dim != dim or a.dim != dim:
        raise ParameterError("drift, a and init disagree on dimension")
    if sigma is None:
        if not a.is_constant:
            raise ParameterError("sigma must be supplied for non-constant a")
        sigma = MatrixField.constant(psd_sqrt(a.constant_matrix))
    return DiffusionSpec(dim, drift, a, sigma, init, tag)


def ou_diffusion(init: Gaussian, tag: str = "ou") -> DiffusionSpec:
    d = init.dim
    return diffusion_spec(VectorField.linear(-np.eye(d)), MatrixField.identity(d), init, tag=tag)


def bm_diffusion(init: Gaussian, tag: str = "bm") -> DiffusionSpec:
    d = init.dim
    return diffusion_spec(VectorField.zero(d), MatrixField.identity(d), init, tag=tag)


@dataclass(frozen=True)
class GraphWalkSpec:
    """Continuous-time walk on a finite graph.

    adjacency is symmetric with no self-loops and must be connected.  The
    intensity j(t, x; y) lives on directed edges; a constant matrix enables
    the fast simulation path, a callable needs rate_bound for thinning.
    """

    n_states: int
    adjacency: np.ndarray
    p0: np.ndarray
    intensity_matrix: np.ndarray | None = None
    intensity_fn: Callable[[float], np.ndarray] | None = None
    rate_bound: float | None = None
    tag: str = ""

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=bool)
        n = self.n_states
        if A.shape != (n, n):
            raise ParameterError(f"adjacency shape {A.shape} != ({n}, {n})")
        if not (A == A.T).all():
            raise ParameterError("adjacency must be symmetric")
        if A.diagonal().any():
            raise ParameterError("self-loops are not allowed")
        if not _connected(A):
            raise ParameterError("adjacency must be connected")
        p = np.asarray(self.p0, dtype=np.float64)
        if p.shape != (n,) or p.min() < 0 or abs(p.sum() - 1.0) > 1e-12:
            raise ParameterError("p0 must be a probability vector over the states")
        if (self.intensity_matrix is None) == (self.intensity_fn is None):
            raise ParameterError("exactly one of intensity_matrix / intensity_fn required")
        A.flags.writeable = False
        object.__setattr__(self, "adjacency", A)
        object.__setattr__(self, "p0", _freeze(p))
        if self.intensity_matrix is not None:
            J = np.asarray(self.intensity_matrix, dtype=np.float64)
            _check_intensity(J, A)
            object.__setattr__(self, "intensity_matrix", _freeze(J))

    @property
    def is_constant(self) -> bool:
        return self.intensity_matrix is not None

    def intensity(self, t: float) -> np.ndarray:
        if self.intensity_matrix is not None:
            return self.intensity_matrix
        J = np.asarray(self.intensity_fn(t), dtype=np.float64)
        _check_intensity(J, self.adjacency)
        return J

    def generator(self, t: float = 0.0) -> np.ndarray:
        """Rate matrix Q with zero row sums."""
        J = np.array(self.intensity(t))
        np.fill_diagonal(J, 0.0)
        Q = J - np.diag(J.sum(axis=1))
        return Q

    def out_rates(self, t: float = 0.0) -> np.ndarray:
        J = self.intensity(t)
        return J.sum(axis=1)


def _connected(A: np.ndarray) -> bool:
    n = A.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in np.nonzero(A[u])[0]:
            if not seen[v]:
                seen[v] = True
                stack.append(int(v))
    return bool(seen.all())


def _check_intensity(J: np.ndarray, A: np.ndarray) -> None:
    if J.shape != A.shape:
        raise ParameterError(f"intensity shape {J.shape} != adjacency {A.shape}")
    if not np.isfinite(J).all():
        raise ParameterError("intensities must be finite")
    if (J < 0).any():
        raise ParameterError("intensities must be nonnegative")
    if (J[~A] != 0).any():
        raise ParameterError("intensity must vanish off the edge set")


def graph_walk(adjacency, intensity, p0, rate_bound=None, tag="") -> GraphWalkSpec:
    A = np.asarray(adjacency, dtype=bool)
    if callable(intensity):
        if rate_bound is None:
            raise ParameterError("time-dependent intensities need rate_bound")
        return GraphWalkSpec(A.shape[0], A, p0, intensity_fn=intensity,
                             rate_bound=float(rate_bound), tag=tag)
    return GraphWalkSpec(A.shape[0], A, p0, intensity_matrix=np.asarray(intensity, float), tag=tag)


def biased_cycle_walk(n: int, rate_cw: float, rate_ccw: float) -> GraphWalkSpec:
    """Nearest-neighbour walk on the n-cycle: rate_cw for x -> x+1, rate_ccw
    for x -> x-1 (mod n).  The uniform law is invariant for any rates."""
    if n < 3:
        raise ParameterError(f"cycle needs n >= 3, got {n}")
    if rate_cw < 0 or rate_ccw < 0 or (rate_cw == 0 and rate_ccw == 0):
        raise ParameterError("rates must be nonnegative and not both zero")
    A = np.zeros((n, n), dtype=bool)
    J = np.zeros((n, n))
    for x in range(n):
        A[x, (x + 1) % n] = A[x, (x - 1) % n] = True
        J[x, (x + 1) % n] = rate_cw
        J[x, (x - 1) % n] = rate_ccw
    return graph_walk(A, J, np.full(n, 1.0 / n), tag=f"cycle{n}")


def counting_reference_walk(adjacency) -> GraphWalkSpec:
    """Unit intensity on every directed edge, uniform initial law."""
    A = np.asarray(adjacency, dtype=bool)
    n = A.shape[0]
    return graph_walk(A, A.astype(np.float64), np.full(n, 1.0 / n), tag="counting")


def walk_marginal_fn(spec: GraphWalkSpec) -> Callable[[float], np.ndarray]:
    """Exact marginals t -> p_t.  Matrix exponential for constant intensities,
    an ODE solve of the forward equation otherwise.  An invariant initial law
    short-circuits both: p_t = p0 without roundoff."""
    if spec.is_constant:
        Q = spec.generator(0.0)
        if np.array_equal(spec.p0 @ Q, np.zeros(spec.n_states)):
            return constant_marginal_fn(spec)
        cache: dict[float, np.ndarray] = {}

        def marginals(t: float) -> np.ndarray:
            t = float(t)
            if t < 0:
                raise ParameterError(f"negative time {t}")
            if t not in cache:
                cache[t] = spec.p0 @ expm(t * Q)
            return cache[t]

        return marginals

    from scipy.integrate import solve_ivp

    def marginals(t: float) -> np.ndarray:
        t = float(t)
        if t < 0:
            raise ParameterError(f"negative time {t}")
        if t == 0.0:
            return np.array(spec.p0)
        sol = solve_ivp(lambda s, p: p @ spec.generator(s), (0.0, t), spec.p0,
                        rtol=1e-12, atol=1e-14, dense_output=False)
        return sol.y[:, -1]

    return marginals


def constant_marginal_fn(spec: GraphWalkSpec, p=None, check_times=(0.0,),
                         tol: float = 1e-12) -> Callable[[float], np.ndarray]:
    """Constant marginals for an invariant initial law, verified at sample times."""
    p = spec.p0 if p is None else np.asarray(p, dtype=np.float64)
    for t in check_times:
        flow = p @ spec.generator(float(t))
        if np.abs(flow).max() > tol:
            raise ConsistencyError(f"law is not invariant at t={t}: residual {np.abs(flow).max()}")
    frozen = _freeze(p)
    return lambda t: frozen


# ---------------------------------------------------------------------------
# JSON model descriptions


@dataclass(frozen=True)
class ModelBundle:
    """What a JSON model description expands to.  Diffusion models carry a
    simulation spec plus (when available) an exact marginal flow and a
    reversible reference; graph models carry a walk spec."""

    kind: str
    dim: int
    diffusion: DiffusionSpec | None = None
    flow: GaussianFlow | None = None
    reference: KolmogorovSpec | None = None
    walk: GraphWalkSpec | None = None


def _require_keys(obj: dict, allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def load_model(obj) -> ModelBundle:
    """Build a model from a JSON object, file path or JSON string.

    Supported types: "ou", "bm", "cycle" and "custom" (named built-in fields
    with coefficient arrays; no expression parsing).
    """
    if isinstance(obj, str):
        try:
            obj = json.loads(obj)
        except json.JSONDecodeError:
            with open(obj) as f:
                obj = json.load(f)
    if not isinstance(obj, dict):
        raise ConfigError("model description must be a JSON object")
    mtype = obj.get("type")
    if mtype == "ou":
        _require_keys(obj, {"type", "dim", "init_mean", "init_cov"},
                      {"type", "init_mean", "init_cov"}, "model")
        init = Gaussian(obj["init_mean"], obj["init_cov"])
        if "dim" in obj and obj["dim"] != init.dim:
            raise ConfigError("model: dim disagrees with init_mean")
        ref, _ = ou_reference(init.dim)
        return ModelBundle("ou", init.dim, diffusion=ou_diffusion(init),
                           flow=ou_marginal_flow(init.mean, init.cov), reference=ref)
    if mtype == "bm":
        _require_keys(obj, {"type", "dim", "init_mean", "init_cov"},
                      {"type", "init_mean", "init_cov"}, "model")
        init = Gaussian(obj["init_mean"], obj["init_cov"])
        return ModelBundle("bm", init.dim, diffusion=bm_diffusion(init),
                           flow=bm_flow(init.cov, init.mean))
    if mtype == "cycle":
        _require_keys(obj, {"type", "n", "rate_cw", "rate_ccw"},
                      {"type", "n", "rate_cw", "rate_ccw"}, "model")
        walk = biased_cycle_walk(int(obj["n"]), float(obj["rate_cw"]), float(obj["rate_ccw"]))
        return ModelBundle("cycle", walk.n_states, walk=walk)
    if mtype == "custom":
        _require_keys(obj, {"type", "dim", "drift", "diffusion_matrix", "init_mean", "init_cov"},
                      {"type", "dim", "drift", "diffusion_matrix", "init_mean", "init_cov"},
                      "model")
        dim = int(obj["dim"])
        drift = _build_drift(obj["drift"], dim)
        a = MatrixField.constant(np.asarray(obj["diffusion_matrix"], dtype=np.float64))
        init = Gaussian(obj["init_mean"], obj["init_cov"])
        return ModelBundle("custom", dim, diffusion=diffusion_spec(drift, a, init, tag="custom"))
    raise ConfigError(f"model: unknown type {mtype!r}")


def _build_drift(obj: dict, dim: int) -> VectorField:
    if not isinstance(obj, dict) or "name" not in obj:
        raise ConfigError("drift: expected an object with a 'name'")
    name = obj["name"]
    if name == "zero":
        _require_keys(obj, {"name"}, {"name"}, "drift")
        return VectorField.zero(dim)
    if name == "linear":
        _require_keys(obj, {"name", "matrix", "offset"}, {"name", "matrix"}, "drift")
        M = np.asarray(obj["matrix"], dtype=np.float64)
        if M.shape != (dim, dim):
            raise ConfigError(f"drift: matrix shape {M.shape} != ({dim}, {dim})")
        off = obj.get("offset")
        return VectorField.linear(M, None if off is None else np.asarray(off, float))
    raise ConfigError(f"drift: unknown name {name!r}")
