"""Command-line surface: reproducible experiments from JSON configs.

Every subcommand reads one config document, validates it strictly (unknown
keys are rejected at every level), and writes its artifacts into the output
directory.  No timestamps, no environment lookups, no hidden state: the
manifest echoes the effective config plus library versions, and a rerun of
the same config produces byte-identical files.

Exit codes: 0 all selected checks passed, 1 at least one check failed,
2 config or schema violation.
"""
from __future__ import annotations

import argparse
import io
import json
import os
import platform
import sys

import numpy as np
import scipy

from . import __version__
from .core import (ConfigError, ParameterError, TimeGrid, VectorField,
                   ensemble_to_csv, load_ensemble, make_grid, save_ensemble)
from .density import exact_flow_density, kde_flow
from .entropy import (current_osmosis_decomposition, heat_flow_dissipation,
                      rw_relative_entropy, entropy_vs_counting)
from .models import Gaussian, ModelBundle, diffusion_spec, load_model, walk_marginal_fn
from .reversal import (BackwardDriftField, ReversedDrift, reversed_jump_intensities)
from .simulate import SimConfig, ctmc_simulate, euler_maruyama
from .verify import (coordinate_function, continuity_residual,
                     detailed_balance_residual, graph_ibp_residual,
                     ibp_residual, nelson_forward_derivative,
                     carre_du_champ_estimate, two_sample_energy)

CHECK_NAMES = ("ibp", "continuity", "reversal", "detailed-balance",
               "carre", "nelson", "dissipation")

# which checks make sense for which model type
_CHECKS_BY_TYPE = {
    "ou": ("reversal", "ibp", "continuity", "carre", "nelson", "dissipation"),
    "bm": ("reversal", "ibp", "continuity", "carre", "nelson"),
    "custom": ("reversal", "ibp", "carre", "nelson"),
    "cycle": ("reversal", "ibp", "detailed-balance"),
}
_DEFAULT_CHECKS = {
    "ou": ["reversal", "ibp", "continuity", "carre", "nelson", "dissipation"],
    "bm": ["reversal", "ibp", "continuity", "carre", "nelson"],
    "custom": ["ibp", "carre", "nelson"],
    # the bundled cycle is biased, hence not reversible; detailed-balance
    # stays opt-in for walks
    "cycle": ["reversal", "ibp"],
}

_TOP_KEYS = {"model", "grid", "n_paths", "seed", "density", "checks", "out_dir"}
_GRID_KEYS = {"T", "n_steps"}


def validate_config(obj: dict) -> dict:
    """Strict schema check; returns the config with defaults filled in."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(obj) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("model", "grid", "seed"):
        if key not in obj:
            raise ConfigError(f"missing required config key: {key}")

    model = obj["model"]
    if not isinstance(model, dict) or "type" not in model:
        raise ConfigError("model must be an object with a 'type' field")
    mtype = model["type"]
    if mtype not in _CHECKS_BY_TYPE:
        raise ConfigError(f"unknown model type {mtype!r}")

    grid = obj["grid"]
    if not isinstance(grid, dict):
        raise ConfigError("grid must be an object")
    unknown = set(grid) - _GRID_KEYS
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    for key in _GRID_KEYS:
        if key not in grid:
            raise ConfigError(f"grid missing key: {key}")
    T = grid["T"]
    n_steps = grid["n_steps"]
    if not isinstance(T, (int, float)) or isinstance(T, bool) or T <= 0:
        raise ConfigError(f"grid.T must be a positive number, got {T!r}")
    if not isinstance(n_steps, int) or isinstance(n_steps, bool) or n_steps < 1:
        raise ConfigError(f"grid.n_steps must be a positive integer, got {n_steps!r}")

    seed = obj["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")

    n_paths = obj.get("n_paths", 1000 if mtype == "cycle" else None)
    if n_paths is None:
        raise ConfigError("n_paths is required for diffusion models")
    if not isinstance(n_paths, int) or isinstance(n_paths, bool) or n_paths < 1:
        raise ConfigError(f"n_paths must be a positive integer, got {n_paths!r}")

    density = obj.get("density", "exact")
    if density not in ("exact", "kde") and not (
            isinstance(density, str) and density.startswith("kde:")):
        raise ConfigError("density must be 'exact', 'kde', or 'kde:<ensemble file>', "
                          f"got {density!r}")

    checks = obj.get("checks", list(_DEFAULT_CHECKS[mtype]))
    if not isinstance(checks, list) or not all(isinstance(c, str) for c in checks):
        raise ConfigError("checks must be a list of names")
    for c in checks:
        if c not in CHECK_NAMES:
            raise ConfigError(f"unknown check name {c!r}; known: {', '.join(CHECK_NAMES)}")
        if c not in _CHECKS_BY_TYPE[mtype]:
            raise ConfigError(f"check {c!r} does not apply to model type {mtype!r}")

    out_dir = obj.get("out_dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("out_dir must be a nonempty string")

    return {"model": model, "grid": {"T": float(T), "n_steps": n_steps},
            "n_paths": n_paths, "seed": seed, "density": density,
            "checks": checks, "out_dir": out_dir}


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            obj = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    return validate_config(obj)


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def write_manifest(out_dir: str, cfg: dict) -> None:
    _write_json(os.path.join(out_dir, "manifest.json"), {
        "config": cfg,
        "package": "pathrev",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "seed": cfg["seed"],
    })


def _snap_times(grid: TimeGrid) -> list[tuple[int, float]]:
    """Five representative grid nodes: ends, quarters, middle."""
    n = grid.n_steps
    ks = sorted({0, n // 4, n // 2, (3 * n) // 4, n})
    return [(k, grid.node(k)) for k in ks]


class _DiffusionRun:
    """Shared state for diffusion subcommands: ensemble, density, reversal."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.bundle = load_model(cfg["model"])
        if self.bundle.diffusion is None:
            raise ConfigError("model is not a diffusion")
        self.spec = self.bundle.diffusion
        self.grid = make_grid(cfg["grid"]["T"], cfg["grid"]["n_steps"])
        self.ensemble = euler_maruyama(self.spec, SimConfig(cfg["n_paths"], cfg["seed"], self.grid))
        src = cfg["density"]
        if src == "exact":
            if self.bundle.flow is None:
                raise ConfigError("model has no closed-form marginal flow; use density='kde'")
            self.density = exact_flow_density(self.bundle.flow)
        elif src == "kde":
            self.density = kde_flow(self.ensemble, rule="score")
        else:
            path = src[len("kde:"):]
            try:
                stored = load_ensemble(path)
            except OSError as exc:
                raise ConfigError(f"cannot read ensemble {path}: {exc}")
            if stored.dim != self.spec.dim or abs(stored.grid.T - self.grid.T) > 1e-12:
                raise ConfigError(f"stored ensemble {path} does not match the config grid")
            self.density = kde_flow(stored, rule="score")
        dim = self.spec.dim
        self.backward = BackwardDriftField(self.spec.drift, self.spec.a,
                                           VectorField.zero(dim), self.density)
        self.reversed_drift = ReversedDrift(self.backward, self.grid.T)

    def probe_box(self) -> tuple[float, float]:
        init = self.spec.init
        lo = float(init.mean[0] - 2.0 * np.sqrt(init.cov[0, 0]) - 0.5)
        hi = float(init.mean[0] + 2.0 * np.sqrt(init.cov[0, 0]) + 0.5)
        return lo, hi


def _reversed_model_obj(run: _DiffusionRun) -> dict:
    """Serializable description of the reversed process.

    Exact Gaussian densities make the reversed drift affine in x: tabulate
    A(s), c(s) at representative reversed times (exact).  KDE densities get
    a pointwise probe table instead (one-dimensional models only).
    """
    T = run.grid.T
    times = [t for _, t in _snap_times(run.grid)]
    dim = run.spec.dim
    a_mat = run.spec.a.constant_matrix
    base = {"T": T, "model": run.cfg["model"], "density": run.cfg["density"],
            "a": None if a_mat is None else a_mat.tolist()}
    if run.cfg["density"] == "exact":
        A_tab, c_tab = [], []
        basis = np.eye(dim)
        for s in times:
            c = run.reversed_drift(s, np.zeros((1, dim)))[0]
            cols = [run.reversed_drift(s, basis[None, j])[0] - c for j in range(dim)]
            A_tab.append(np.stack(cols, axis=1).tolist())
            c_tab.append(c.tolist())
        base.update({"kind": "reversed_drift_affine", "times": times,
                     "A": A_tab, "c": c_tab})
        return base
    if dim != 1:
        raise ConfigError("kde probe table requires a one-dimensional model")
    lo, hi = run.probe_box()
    xs = np.linspace(lo, hi, 11)
    table = [[float(run.reversed_drift(s, xs[:, None])[i, 0]) for i in range(xs.size)]
             for s in times]
    base.update({"kind": "reversed_drift_probe", "times": times,
                 "x": xs.tolist(), "b_star": table})
    return base


def _probe_rows(run: _DiffusionRun):
    """(t, x, b_star) rows along the first coordinate, reversed clock."""
    if run.spec.dim != 1:
        return None
    lo, hi = run.probe_box()
    xs = np.linspace(lo, hi, 11)
    rows = []
    for _, s in _snap_times(run.grid):
        vals = run.reversed_drift(s, xs[:, None])[:, 0]
        rows.extend((float(s), float(x), float(v)) for x, v in zip(xs, vals))
    return rows


def _density_probe_rows(run: _DiffusionRun):
    """(t, x, pdf, score) rows along the first coordinate, forward clock.

    Points outside the density's trust region report pdf with a nan score.
    """
    if run.spec.dim != 1:
        return None
    lo, hi = run.probe_box()
    xs = np.linspace(lo, hi, 11)
    rows = []
    for _, t in _snap_times(run.grid):
        pdf = np.atleast_1d(run.density.pdf(t, xs[:, None]))
        sc = np.asarray(run.density.score(t, xs[:, None]), dtype=np.float64)[:, 0]
        ok = np.atleast_1d(run.density.in_support(t, xs[:, None]))
        rows.extend((float(t), float(x), float(p), float(s) if good else float("nan"))
                    for x, p, s, good in zip(xs, pdf, sc, ok))
    return rows


# ---------------------------------------------------------------- checks

def _check_ibp(run: _DiffusionRun) -> dict:
    t = run.grid.node(run.grid.n_steps // 2)
    X = run.ensemble.paths[:, run.grid.n_steps // 2, :]
    u = coordinate_function(run.spec.dim)
    v_bwd = VectorField(run.backward, run.spec.dim)
    rep = ibp_residual(run.spec.drift, v_bwd, run.spec.a, X, t, u, u)
    out = rep.to_dict()
    out["t"] = t
    return out


def _check_continuity(run: _DiffusionRun) -> dict:
    if run.bundle.flow is None:
        raise ConfigError("continuity check needs a closed-form marginal flow")
    # the time derivative of a per-slice KDE is not meaningful; always probe
    # the exact flow here
    flow = exact_flow_density(run.bundle.flow)
    drift = run.spec.drift
    bwd = BackwardDriftField(drift, run.spec.a, VectorField.zero(run.spec.dim), flow)

    def v_cu(t, X):
        return 0.5 * (drift(t, X) - bwd(t, X))

    lo, hi = run.probe_box()
    rep = continuity_residual(flow, VectorField(v_cu, run.spec.dim), run.grid,
                              ([lo], [hi]))
    out = rep.to_dict()
    out["passed"] = rep.sup_residual <= 1e-6
    return out


def _check_reversal_diffusion(run: _DiffusionRun) -> dict:
    n_cmp = min(5000, run.ensemble.n_paths)
    T = run.grid.T
    if run.cfg["density"] == "exact":
        init_T = run.bundle.flow.at(T)
    else:
        # moment-matched start; adequate for Gaussian models, noted otherwise
        XT = run.ensemble.paths[:, -1, :]
        init_T = Gaussian(XT.mean(axis=0), np.atleast_2d(np.cov(XT.T)))
    rev_spec = diffusion_spec(VectorField(run.reversed_drift, run.spec.dim),
                              run.spec.a, init_T, tag=run.spec.tag + "~rev")
    rev = euler_maruyama(rev_spec, SimConfig(n_cmp, run.cfg["seed"] + 1, run.grid))
    n = run.grid.n_steps
    slices = {}
    worst = 1.0
    for k, s in _snap_times(run.grid):
        A = rev.paths[:, k, :]
        B = run.ensemble.paths[:n_cmp, n - k, :]
        res = two_sample_energy(A, B, n_perm=199, seed=run.cfg["seed"] + 100 + k)
        slices[f"s={s}"] = {"statistic": res.statistic, "p_value": res.p_value}
        worst = min(worst, res.p_value)
    return {"slices": slices, "min_p_value": worst, "n_compare": n_cmp,
            "passed": worst >= 0.01}


def _check_carre(run: _DiffusionRun) -> dict:
    a_mat = run.spec.a.constant_matrix
    if a_mat is None:
        raise ConfigError("carre check requires a constant diffusion matrix")
    expected = float(a_mat[0, 0])
    u = coordinate_function(run.spec.dim)
    t = run.grid.node(run.grid.n_steps // 4)
    h = max(run.grid.dt, round(0.05 / run.grid.dt) * run.grid.dt)
    rep = carre_du_champ_estimate(run.ensemble, u, u, t, h, expected, atol=0.1)
    out = rep.to_dict()
    out.update({"t": t, "h": h, "expected": expected,
                "note": (out["note"] + "; " if out["note"] else "")
                + "atol covers the O(h) increment bias"})
    return out


def _check_nelson(run: _DiffusionRun) -> dict:
    x0 = run.spec.init.mean
    expected = float(run.spec.drift(0.0, x0[None, :])[0, 0])
    dt = run.grid.dt
    h_small = max(dt, round(0.1 / dt) * dt)
    est = nelson_forward_derivative(run.ensemble, coordinate_function(run.spec.dim),
                                    0.0, x0, window=0.2, h_list=[h_small, 2 * h_small])
    err = abs(est - expected)
    return {"estimate": est, "expected": expected, "abs_error": err,
            "tolerance": 0.1, "passed": err <= 0.1}


def _check_dissipation(run: _DiffusionRun) -> tuple[dict, list]:
    ref = run.bundle.reference
    if ref is None or ref.m is None or run.bundle.flow is None:
        raise ConfigError("dissipation check needs a reversible reference law")
    a_mat = run.spec.a.constant_matrix
    report, residual = heat_flow_dissipation(run.bundle.flow, ref.m, run.grid, a_mat)
    f_diff = float(report.free_energy[-1] - report.free_energy[0])
    out = {"residual": residual, "free_energy_change": f_diff,
           "tolerance": 1e-5, "passed": residual <= 1e-5}
    return out, list(report.to_rows())


class _WalkRun:
    """Shared state for random-walk subcommands."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.bundle = load_model(cfg["model"])
        if self.bundle.walk is None:
            raise ConfigError("model is not a random walk")
        self.spec = self.bundle.walk
        self.grid = make_grid(cfg["grid"]["T"], cfg["grid"]["n_steps"])
        self.marginals = walk_marginal_fn(self.spec)
        self.reversed_walk = reversed_jump_intensities(self.spec, self.marginals,
                                                       self.grid.T)


def _walk_edges(spec) -> list[tuple[int, int]]:
    A = spec.adjacency
    return [(x, y) for x in range(spec.n_states) for y in range(spec.n_states) if A[x, y]]


def _rw_table_rows(run: _WalkRun):
    """(from, to, t, j_fwd, j_bwd): both intensities on the forward clock."""
    rows = []
    for _, t in _snap_times(run.grid):
        Jf = run.spec.intensity(t)
        Jb = run.reversed_walk.backward_intensity(t)
        for x, y in _walk_edges(run.spec):
            rows.append((x, y, float(t), float(Jf[x, y]), float(Jb[x, y])))
    return rows


def _check_reversal_walk(run: _WalkRun) -> dict:
    """Reversing the reversed walk must return the forward intensities."""
    T = run.grid.T
    rev_spec = run.reversed_walk.as_walk_spec(rate_bound=float(run.spec.out_rates().max()) * 4 + 1)

    def rev_marginals(s: float) -> np.ndarray:
        return run.marginals(T - s)

    double = reversed_jump_intensities(rev_spec, rev_marginals, T)
    worst = 0.0
    for _, t in _snap_times(run.grid):
        J0 = run.spec.intensity(t)
        # double reversal lands back on the forward clock
        J2 = double.intensity(t)
        mask = run.spec.adjacency & np.isfinite(J2)
        worst = max(worst, float(np.abs(np.where(mask, J0 - J2, 0.0)).max()))
    return {"involution_residual": worst, "tolerance": 1e-12,
            "passed": worst <= 1e-12}


def _check_ibp_walk(run: _WalkRun) -> dict:
    n = run.spec.n_states
    worst = 0.0
    for t in (0.0, 0.5 * run.grid.T):
        p = run.marginals(t)
        for iu in range(n):
            for iv in range(n):
                u = np.zeros(n)
                v = np.zeros(n)
                u[iu] = 1.0
                v[iv] = 1.0
                rep = graph_ibp_residual(run.spec, run.reversed_walk, p, t, u, v)
                worst = max(worst, abs(rep.estimate))
    return {"max_abs_residual": worst, "pairs": n * n, "tolerance": 1e-12,
            "passed": worst <= 1e-12}


def _check_detailed_balance(run: _WalkRun) -> dict:
    m = np.ones(run.spec.n_states)
    res = detailed_balance_residual(m, run.spec, 0.0)
    return {"residual": res, "reference": "counting", "tolerance": 1e-12,
            "passed": res <= 1e-12}


def _entropy_walk_obj(run: _WalkRun) -> dict:
    total = rw_relative_entropy(run.spec, run.marginals, run.grid)
    boundary = entropy_vs_counting(run.spec.p0)
    return {"relative_entropy": total, "initial_term": boundary,
            "flux_term": total - boundary}


# ------------------------------------------------------------ subcommands

def _run_checks(cfg: dict, run_obj, out_dir: str | None):
    """Execute cfg['checks'] against a prepared run; returns (report, ok)."""
    reports = {}
    ok = True
    fisher_rows = None
    for name in cfg["checks"]:
        if isinstance(run_obj, _DiffusionRun):
            if name == "ibp":
                rep = _check_ibp(run_obj)
            elif name == "continuity":
                rep = _check_continuity(run_obj)
            elif name == "reversal":
                rep = _check_reversal_diffusion(run_obj)
            elif name == "carre":
                rep = _check_carre(run_obj)
            elif name == "nelson":
                rep = _check_nelson(run_obj)
            elif name == "dissipation":
                rep, fisher_rows = _check_dissipation(run_obj)
            else:
                raise ConfigError(f"check {name!r} does not apply here")
        else:
            if name == "reversal":
                rep = _check_reversal_walk(run_obj)
            elif name == "ibp":
                rep = _check_ibp_walk(run_obj)
            elif name == "detailed-balance":
                rep = _check_detailed_balance(run_obj)
            else:
                raise ConfigError(f"check {name!r} does not apply here")
        reports[name] = rep
        ok = ok and bool(rep["passed"])
        print(f"check {name}: {'PASS' if rep['passed'] else 'FAIL'}")
    report = {"checks": reports, "passed": ok}
    if out_dir is not None:
        _write_json(os.path.join(out_dir, "verify_report.json"), report)
        if fisher_rows is not None:
            _write_csv(os.path.join(out_dir, "fisher.csv"),
                       ["t", "free_energy", "fisher"], fisher_rows)
    return report, ok


def cmd_run(cfg: dict, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, cfg)
    if cfg["model"]["type"] == "cycle":
        run = _WalkRun(cfg)
        rows = [(float(t),) + tuple(float(p) for p in run.marginals(t))
                for _, t in _snap_times(run.grid)]
        _write_csv(os.path.join(out_dir, "marginals.csv"),
                   ["t"] + [f"p{i}" for i in range(run.spec.n_states)], rows)
        _write_csv(os.path.join(out_dir, "reversed_intensities.csv"),
                   ["from_state", "to_state", "t", "j_fwd", "j_bwd"],
                   _rw_table_rows(run))
        _write_json(os.path.join(out_dir, "entropy_report.json"), _entropy_walk_obj(run))
        _, ok = _run_checks(cfg, run, out_dir)
    else:
        run = _DiffusionRun(cfg)
        save_ensemble(run.ensemble, os.path.join(out_dir, "ensemble.bin"))
        rows = _probe_rows(run)
        if rows is not None:
            _write_csv(os.path.join(out_dir, "reversed_probe.csv"),
                       ["t", "x", "b_star"], rows)
        drows = _density_probe_rows(run)
        if drows is not None:
            _write_csv(os.path.join(out_dir, "density_probe.csv"),
                       ["t", "x", "pdf", "score"], drows)
        _write_json(os.path.join(out_dir, "reversed_model.json"), _reversed_model_obj(run))
        if run.bundle.reference is not None:
            report = current_osmosis_decomposition(run.spec.drift, run.density,
                                                  run.bundle.reference, run.ensemble)
            _write_json(os.path.join(out_dir, "entropy_report.json"), report.to_dict())
        _, ok = _run_checks(cfg, run, out_dir)
    print(f"artifacts written to {out_dir}")
    return 0 if ok else 1


def cmd_simulate(cfg: dict, out_dir: str, fmt: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, cfg)
    if cfg["model"]["type"] == "cycle":
        run = _WalkRun(cfg)
        e = ctmc_simulate(run.spec, run.grid.T, cfg["n_paths"], cfg["seed"])
        rows = []
        for pid, events in enumerate(e.events):
            rows.extend((pid, float(t), u, v) for t, u, v in events)
        _write_csv(os.path.join(out_dir, "events.csv"),
                   ["path_id", "t", "from_state", "to_state"], rows)
        print(f"{cfg['n_paths']} jump paths written to {out_dir}")
        return 0
    run = _DiffusionRun(cfg)
    save_ensemble(run.ensemble, os.path.join(out_dir, "ensemble.bin"))
    if fmt == "csv":
        with open(os.path.join(out_dir, "ensemble.csv"), "w", newline="") as f:
            ensemble_to_csv(run.ensemble, f)
    print(f"{cfg['n_paths']} paths written to {out_dir}")
    return 0


def cmd_reverse(cfg: dict, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, cfg)
    if cfg["model"]["type"] == "cycle":
        run = _WalkRun(cfg)
        _write_csv(os.path.join(out_dir, "reversed_intensities.csv"),
                   ["from_state", "to_state", "t", "j_fwd", "j_bwd"],
                   _rw_table_rows(run))
    else:
        run = _DiffusionRun(cfg)
        rows = _probe_rows(run)
        if rows is not None:
            _write_csv(os.path.join(out_dir, "reversed_probe.csv"),
                       ["t", "x", "b_star"], rows)
        drows = _density_probe_rows(run)
        if drows is not None:
            _write_csv(os.path.join(out_dir, "density_probe.csv"),
                       ["t", "x", "pdf", "score"], drows)
        _write_json(os.path.join(out_dir, "reversed_model.json"), _reversed_model_obj(run))
    print(f"reversal artifacts written to {out_dir}")
    return 0


def cmd_entropy(cfg: dict, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, cfg)
    if cfg["model"]["type"] == "cycle":
        run = _WalkRun(cfg)
        obj = _entropy_walk_obj(run)
    else:
        run = _DiffusionRun(cfg)
        if run.bundle.reference is None:
            raise ConfigError("entropy report needs a model with a reversible "
                              "reference; only 'ou' provides one")
        report = current_osmosis_decomposition(run.spec.drift, run.density,
                                               run.bundle.reference, run.ensemble)
        obj = report.to_dict()
        frep, _ = heat_flow_dissipation(run.bundle.flow, run.bundle.reference.m,
                                        run.grid, run.spec.a.constant_matrix)
        _write_csv(os.path.join(out_dir, "fisher.csv"),
                   ["t", "free_energy", "fisher"], list(frep.to_rows()))
    _write_json(os.path.join(out_dir, "entropy_report.json"), obj)
    print(json.dumps(obj, indent=2, sort_keys=True))
    return 0


def cmd_verify(cfg: dict, out_dir: str, check_names: list[str]) -> int:
    if check_names:
        cfg = dict(cfg)
        cfg["checks"] = check_names
        cfg = validate_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, cfg)
    run = _WalkRun(cfg) if cfg["model"]["type"] == "cycle" else _DiffusionRun(cfg)
    report, ok = _run_checks(cfg, run, out_dir)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if ok else 1


def cmd_rw(cfg: dict, out_dir: str, action: str, fmt: str) -> int:
    if cfg["model"]["type"] != "cycle":
        raise ConfigError("rw subcommand needs a random-walk model")
    run = _WalkRun(cfg)
    if action == "reverse":
        rows = _rw_table_rows(run)
        if fmt == "json":
            obj = [{"from_state": x, "to_state": y, "t": t, "j_fwd": jf, "j_bwd": jb}
                   for x, y, t, jf, jb in rows]
            print(json.dumps(obj, indent=2, sort_keys=True))
        else:
            buf = io.StringIO()
            buf.write("from_state,to_state,t,j_fwd,j_bwd\n")
            for x, y, t, jf, jb in rows:
                buf.write(f"{x},{y},{_fmt(t)},{_fmt(jf)},{_fmt(jb)}\n")
            print(buf.getvalue(), end="")
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            write_manifest(out_dir, cfg)
            _write_csv(os.path.join(out_dir, "reversed_intensities.csv"),
                       ["from_state", "to_state", "t", "j_fwd", "j_bwd"], rows)
        return 0
    if action == "entropy":
        obj = _entropy_walk_obj(run)
        print(json.dumps(obj, indent=2, sort_keys=True))
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            write_manifest(out_dir, cfg)
            _write_json(os.path.join(out_dir, "entropy_report.json"), obj)
        return 0
    if action == "ibp":
        rep = _check_ibp_walk(run)
        print(json.dumps(rep, indent=2, sort_keys=True))
        return 0 if rep["passed"] else 1
    raise ConfigError(f"unknown rw action {action!r}")


_CHECK_HELP = """\
checks:
  ibp               mean of the generator bracket (L+u + L-u) v + Gamma(u,v)
                    over a marginal slice; zero for a true forward/backward
                    drift pair
  continuity        finite-difference residual of d_t rho + div(rho v_cu) = 0
                    for the current velocity on a probe box
  reversal          diffusions: simulate the reversed SDE from the terminal
                    law and compare against the flipped forward ensemble
                    (energy-distance permutation test per slice); walks:
                    reverse the reversed intensities and require the forward
                    rates back exactly
  detailed-balance  max over edges of |m(x) j(x,y) - m(y) j(y,x)| against the
                    counting measure (walks)
  carre             product-increment estimate of E Gamma(u,v) at short lag
                    versus its model value
  nelson            windowed forward difference quotient of E[u(X)] near a
                    point versus the model drift
  dissipation       free-energy balance along the marginal flow: F change
                    plus twice the time-integrated Fisher information
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathrev",
        description="Simulate Markov diffusions and random walks, reverse them "
                    "in time, and certify the reversal identities numerically.",
        epilog=_CHECK_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("run", help="full pipeline: simulate, reverse, entropy, verify")
    common(p)
    p = sub.add_parser("simulate", help="generate and store an ensemble")
    common(p)
    p.add_argument("--format", choices=("csv", "json"), default="json",
                   help="also write a CSV ensemble with --format csv")
    p = sub.add_parser("reverse", help="reversed drift probe and model descriptor")
    common(p)
    p = sub.add_parser("entropy", help="entropy report and Fisher table")
    common(p)
    p = sub.add_parser("verify", help="run named checks",
                       epilog=_CHECK_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("checks", nargs="*", metavar="check",
                   help="check names (default: the config's list)")
    p = sub.add_parser("rw", help="random-walk actions")
    common(p)
    p.add_argument("action", choices=("reverse", "entropy", "ibp"))
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be nonnegative")
            cfg["seed"] = args.seed
        out_dir = args.out if args.out is not None else cfg["out_dir"]
        if args.command == "run":
            return cmd_run(cfg, out_dir)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir, args.format)
        if args.command == "reverse":
            return cmd_reverse(cfg, out_dir)
        if args.command == "entropy":
            return cmd_entropy(cfg, out_dir)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir, list(args.checks))
        if args.command == "rw":
            return cmd_rw(cfg, args.out or "", args.action, args.format)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ParameterError as exc:
        print(f"parameter error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
