"""Shared value types for the toolkit.

Time grids, path ensembles (diffusion and jump), vector/matrix fields, the
deterministic per-path random stream contract, and ensemble serialization.
Everything downstream builds on these containers, so they are deliberately
small, immutable and numpy-only.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

_U64 = (1 << 64) - 1

_MAGIC = b"PENS1\x00"
_HEADER = struct.Struct("<HIQQdQ")  # version, dim, n_paths, n_steps, T, seed


class ParameterError(ValueError):
    """Invalid model or grid parameters."""


class SimulationError(RuntimeError):
    """A simulation produced a non-finite state."""


class SupportError(RuntimeError):
    """Evaluation requested outside the trusted support of a density."""


class BandwidthError(ValueError):
    """A bandwidth rule could not produce a usable bandwidth."""


class ConsistencyError(RuntimeError):
    """Inputs violate a structural consistency requirement."""


class NumericError(RuntimeError):
    """A numerically degenerate quantity was encountered."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """Invalid run configuration."""


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Random stream for one path, a pure function of (seed, path index).

    Counter-based (Philox) so the stream is independent of how paths are
    batched or scheduled.  Every stochastic routine in the package draws
    per-path randomness through this function and nothing else.
    """
    key = [int(seed) & _U64, int(path_index) & _U64]
    return np.random.Generator(np.random.Philox(key=key))


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with n_steps intervals."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise ParameterError(f"horizon must be finite and positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ParameterError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1, dtype=np.float64) * self.dt
        t[-1] = self.T  # last node is T itself, not an accumulated sum
        t.flags.writeable = False
        return t

    def node(self, i: int) -> float:
        return float(self.nodes[i])

    def index_of(self, t: float) -> int:
        """Nearest grid node to t.  t must lie within [0, T] up to roundoff."""
        if not np.isfinite(t) or t < -1e-12 or t > self.T * (1 + 1e-12) + 1e-12:
            raise ParameterError(f"time {t} outside [0, {self.T}]")
        return int(round(min(max(t, 0.0), self.T) / self.dt))


def make_grid(T: float, n_steps: int) -> TimeGrid:
    return TimeGrid(T, n_steps)


def reverse_index(grid: TimeGrid, i: int) -> int:
    """Index of the node that time reversal maps node i onto."""
    if int(i) != i or not (0 <= i <= grid.n_steps):
        raise ParameterError(f"index {i} outside 0..{grid.n_steps}")
    return grid.n_steps - int(i)


@dataclass(frozen=True)
class PathEnsemble:
    """Paths of a diffusion sampled on a common grid.

    paths has shape (n_paths, n_steps + 1, dim), float64, finite.  seed and
    model_tag record provenance; together with the grid they determine the
    tensor exactly (see path_rng).
    """

    grid: TimeGrid
    paths: np.ndarray
    seed: int
    model_tag: str = ""

    def __post_init__(self):
        p = np.asarray(self.paths, dtype=np.float64)
        if p.ndim != 2 + 1:
            raise ParameterError(f"paths must be 3-d, got shape {p.shape}")
        if p.shape[1] != self.grid.n_steps + 1:
            raise ParameterError(
                f"paths second axis {p.shape[1]} != n_steps+1 = {self.grid.n_steps + 1}")
        if p.shape[0] < 1 or p.shape[2] < 1:
            raise ParameterError(f"degenerate paths shape {p.shape}")
        if not np.isfinite(p).all():
            raise ParameterError("paths contain non-finite values")
        object.__setattr__(self, "paths", _freeze(p))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]


_FLIP_SUFFIX = "~rev"


def flip_ensemble(e: PathEnsemble) -> PathEnsemble:
    """Reverse every path in time.  Involution: flipping twice is bit-exact."""
    tag = e.model_tag
    tag = tag[: -len(_FLIP_SUFFIX)] if tag.endswith(_FLIP_SUFFIX) else tag + _FLIP_SUFFIX
    return PathEnsemble(e.grid, e.paths[:, ::-1, :].copy(), e.seed, tag)


@dataclass(frozen=True)
class JumpPathEnsemble:
    """Jump paths of a finite-state walk on [0, T], stored grid-free.

    events[i] is the ordered tuple of (time, from_state, to_state) for path i.
    States are integers in 0..n_states-1.  Paths are cadlag: the state at t is
    the target of the last event at or before t.
    """

    n_states: int
    T: float
    initial_states: np.ndarray
    events: tuple
    seed: int
    model_tag: str = ""

    def __post_init__(self):
        init = np.asarray(self.initial_states, dtype=np.int64)
        if init.ndim != 1 or init.size < 1:
            raise ParameterError("initial_states must be a non-empty 1-d array")
        if init.min() < 0 or init.max() >= self.n_states:
            raise ParameterError("initial state outside 0..n_states-1")
        init.flags.writeable = False
        object.__setattr__(self, "initial_states", init)
        object.__setattr__(self, "events", tuple(tuple(ev) for ev in self.events))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "seed", int(self.seed))
        if len(self.events) != init.size:
            raise ParameterError("events and initial_states disagree on n_paths")

    @property
    def n_paths(self) -> int:
        return self.initial_states.size

    def validate(self, adjacency: np.ndarray | None = None) -> None:
        """Check event ordering, chain consistency and (optionally) edges."""
        for i, evs in enumerate(self.events):
            prev_t = 0.0
            state = int(self.initial_states[i])
            for (s, u, v) in evs:
                if not (prev_t < s <= self.T):
                    raise ConsistencyError(f"path {i}: event time {s} not increasing in (0, T]")
                if u != state:
                    raise ConsistencyError(f"path {i}: event from-state {u} != current {state}")
                if adjacency is not None and not adjacency[u, v]:
                    raise ConsistencyError(f"path {i}: jump {u}->{v} not an edge")
                prev_t, state = s, int(v)


class VectorField:
    """Time-dependent vector field evaluated on batches of points.

    The wrapped function receives (t, X) with X of shape (n, dim) and must
    return an (n, dim) array.  Calling with a single point of shape (dim,)
    returns a (dim,) vector.
    """

    def __init__(self, fn: Callable[[float, np.ndarray], np.ndarray], dim: int):
        self._fn = fn
        self.dim = int(dim)

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        X = np.asarray(x, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ParameterError(f"expected points of dimension {self.dim}, got shape {np.shape(x)}")
        out = np.asarray(self._fn(t, X), dtype=np.float64)
        if out.shape != X.shape:
            raise NumericError(f"field returned shape {out.shape}, expected {X.shape}")
        return out[0] if single else out

    @staticmethod
    def zero(dim: int) -> "VectorField":
        return VectorField(lambda t, X: np.zeros_like(X), dim)

    @staticmethod
    def constant(vec: Sequence[float]) -> "VectorField":
        v = np.asarray(vec, dtype=np.float64)
        return VectorField(lambda t, X: np.broadcast_to(v, X.shape).copy(), v.size)

    @staticmethod
    def linear(matrix: np.ndarray, offset: Sequence[float] | None = None) -> "VectorField":
        """x -> matrix @ x + offset, constant in t."""
        A = np.asarray(matrix, dtype=np.float64)
        c = np.zeros(A.shape[0]) if offset is None else np.asarray(offset, dtype=np.float64)
        return VectorField(lambda t, X: X @ A.T + c, A.shape[1])


class MatrixField:
    """Symmetric matrix field (t, x) -> dim x dim.

    Symmetry is enforced by construction (the output is symmetrized).  A
    constant field caches its matrix, its inverse action and a PSD square
    root; the general pointwise form falls back to per-point loops, which is
    acceptable because all shipped models use constant coefficients.
    """

    def __init__(self, fn: Callable[[float, np.ndarray], np.ndarray] | None,
                 dim: int, constant: np.ndarray | None = None):
        self.dim = int(dim)
        if constant is not None:
            A = np.asarray(constant, dtype=np.float64)
            if A.shape != (self.dim, self.dim):
                raise ParameterError(f"constant matrix shape {A.shape} != ({dim}, {dim})")
            A = 0.5 * (A + A.T)
            self._const = _freeze(A)
            self._fn = None
        else:
            if fn is None:
                raise ParameterError("need either fn or constant")
            self._const = None
            self._fn = fn

    @classmethod
    def constant(cls, matrix: np.ndarray) -> "MatrixField":
        M = np.asarray(matrix, dtype=np.float64)
        return cls(None, M.shape[0], constant=M)

    @classmethod
    def identity(cls, dim: int) -> "MatrixField":
        return cls(None, dim, constant=np.eye(dim))

    @property
    def is_constant(self) -> bool:
        return self._const is not None

    @property
    def constant_matrix(self) -> np.ndarray | None:
        return self._const

    def at(self, t: float, x: np.ndarray) -> np.ndarray:
        if self._const is not None:
            return self._const
        M = np.asarray(self._fn(t, np.asarray(x, dtype=np.float64)), dtype=np.float64)
        if M.shape != (self.dim, self.dim):
            raise NumericError(f"matrix field returned shape {M.shape}")
        return 0.5 * (M + M.T)

    def apply(self, t: float, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Row-wise a(t, x_i) @ v_i."""
        if self._const is not None:
            return V @ self._const.T
        out = np.empty_like(V)
        for i in range(X.shape[0]):
            out[i] = self.at(t, X[i]) @ V[i]
        return out

    def quad(self, t: float, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Row-wise quadratic form v_i . a(t, x_i) v_i."""
        if self._const is not None:
            return np.einsum("ni,ij,nj->n", V, self._const, V)
        out = np.empty(X.shape[0])
        for i in range(X.shape[0]):
            out[i] = V[i] @ self.at(t, X[i]) @ V[i]
        return out

    def solve(self, t: float, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Row-wise a(t, x_i)^{-1} v_i."""
        if self._const is not None:
            return np.linalg.solve(self._const, V.T).T
        out = np.empty_like(V)
        for i in range(X.shape[0]):
            out[i] = np.linalg.solve(self.at(t, X[i]), V[i])
        return out

    def sqrt_factor(self, t: float = 0.0, x: np.ndarray | None = None) -> np.ndarray:
        """A factor S with S S^T = a(t, x).  Cholesky when SPD, PSD fallback."""
        A = self.at(t, np.zeros(self.dim) if x is None else x)
        return psd_sqrt(A)

    def check_spd(self, points: np.ndarray, t: float = 0.0) -> None:
        for x in np.atleast_2d(points):
            A = self.at(t, x)
            try:
                np.linalg.cholesky(A)
            except np.linalg.LinAlgError:
                raise NumericError(f"matrix field not SPD at t={t}, x={x}") from None


def psd_sqrt(A: np.ndarray) -> np.ndarray:
    """Factor S with S S^T = A for symmetric PSD A.  Tolerates zero modes."""
    A = np.asarray(A, dtype=np.float64)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(0.5 * (A + A.T))
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise NumericError(f"matrix has negative eigenvalue {w.min()}") from None
        return Q @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


def trapezoid(y: np.ndarray, x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.trapezoid(y, x, axis=axis)


def save_ensemble(e: PathEnsemble, path: str) -> None:
    """Write an ensemble to the binary container (bit-exact round trip)."""
    tag = e.model_tag.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(_HEADER.pack(1, e.dim, e.n_paths, e.grid.n_steps,
                             e.grid.T, e.seed & _U64))
        f.write(struct.pack("<I", len(tag)))
        f.write(tag)
        f.write(np.ascontiguousarray(e.paths, dtype="<f8").tobytes())


def load_ensemble(path: str) -> PathEnsemble:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ConsistencyError(f"{path}: not an ensemble container")
        version, dim, n_paths, n_steps, T, seed_u = _HEADER.unpack(f.read(_HEADER.size))
        if version != 1:
            raise ConsistencyError(f"{path}: unsupported container version {version}")
        (taglen,) = struct.unpack("<I", f.read(4))
        tag = f.read(taglen).decode("utf-8")
        count = n_paths * (n_steps + 1) * dim
        data = np.frombuffer(f.read(count * 8), dtype="<f8", count=count)
    seed = seed_u - (1 << 64) if seed_u >= (1 << 63) else seed_u
    paths = data.reshape(n_paths, n_steps + 1, dim)
    return PathEnsemble(TimeGrid(T, n_steps), paths, seed, tag)


def ensemble_to_csv(e: PathEnsemble, path_or_buffer) -> None:
    """CSV export: one row per (path, node), full float precision.

    Intended for slices and small ensembles; the binary container is the
    interchange format for anything large.
    """
    own = isinstance(path_or_buffer, str)
    f = open(path_or_buffer, "w", newline="") if own else path_or_buffer
    try:
        cols = ",".join(f"x{d + 1}" for d in range(e.dim))
        f.write(f"path_id,t,{cols}\n")
        nodes = e.grid.nodes
        for i in range(e.n_paths):
            for k in range(e.grid.n_steps + 1):
                vals = ",".join(repr(float(v)) for v in e.paths[i, k])
                f.write(f"{i},{float(nodes[k])!r},{vals}\n")
    finally:
        if own:
            f.close()


def ensemble_csv_string(e: PathEnsemble) -> str:
    buf = io.StringIO()
    ensemble_to_csv(e, buf)
    return buf.getvalue()
