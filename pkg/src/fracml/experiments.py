"""Experiment runners, diagnostics, the property suite and CSV export."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptive import EstimatorConfig, adaptive_loop
from .fem import (CoefVector, build_space, prolongation, mass_matrix, assign_averaging,
                  assign_averaging_leveled, scott_zhang_matrix, evaluation_matrix)
from .hierarchy import (Hierarchy, build_fcc_hierarchy, chop, fcc, fcc_parts, uniform_mesh,
                        required_depth)
from .kernel import FracParams, QuadConfig, assemble_stiffness
from .mesh import (MeshView, RefinementForest, make_initial_mesh, refine, uniform_refine,
                   hanging_nodes, write_mesh, read_mesh)
from .preconditioner import (DiagonalCache, build_preconditioner, condition_report,
                             level_marked_nodes, stable_decomposition)

__all__ = ["RunConfig", "ConditionRow", "ConditionResult", "DecompositionRow",
           "PropertyResult", "PropertyReport", "ExperimentError", "load_config",
           "run_condition_experiment", "run_decomposition_diagnostic", "run_property_suite",
           "run_adaptive", "export_mesh", "export_matrix", "export_vector", "import_matrix",
           "import_vector", "sz_coincidence_defect", "szzero_defect", "random_nvb_mesh",
           "CONDITION_HEADER", "DECOMPOSITION_HEADER", "ADAPT_HEADER", "fit_loglog_slope"]

log = logging.getLogger(__name__)

FAMILY_MAP = {"p1": "p1_zero_bc", "p0": "p0"}


class ExperimentError(RuntimeError):
    """An experiment stopped early; partial output has been written."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    domain: str = "l_shape"
    s: float = 0.25
    family: str = "p1"
    hierarchy: str = "adaptive"
    theta: float = 0.5
    max_dofs: int = 2000
    gauss_order: int = 5
    solver_tol: float = 1e-8
    eig_tol: float = 1e-3
    eig_max_iter: int = 2000
    seed: int = 0
    out: str = "results"
    initial_refinements: int = 1
    decomp_max_dofs: int = 600
    decomp_max_depth: int = 6
    decomp_samples: int = 10
    decomp_q: float = 2.0
    decomp_thetas: tuple = (1.0 / 3.0, 2.0 / 3.0)

    def __post_init__(self):
        if self.family not in FAMILY_MAP:
            raise ValueError("family must be p0 or p1")
        if not 0.0 < self.s < 1.0:
            raise ValueError("s must lie in (0, 1)")
        if self.family == "p0" and self.s >= 0.5:
            raise ValueError("the p0 family requires s < 1/2")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.hierarchy not in ("adaptive", "fcc", "uniform"):
            raise ValueError("hierarchy must be adaptive, fcc or uniform")
        if self.domain not in ("l_shape", "unit_square"):
            raise ValueError("domain must be l_shape or unit_square")
        if self.max_dofs < 1 or self.gauss_order < 2:
            raise ValueError("max_dofs must be positive and gauss_order at least 2")
        if self.decomp_q < 1.0:
            raise ValueError("q must be at least 1")

    @property
    def fe_family(self) -> str:
        return FAMILY_MAP[self.family]

    @property
    def params(self) -> FracParams:
        return FracParams(self.s)

    @property
    def quad(self) -> QuadConfig:
        return QuadConfig(gauss_order=self.gauss_order)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return dataclasses.replace(self, **kw)


def _coerce(name: str, text: str):
    ftype = {f.name: f for f in dataclasses.fields(RunConfig)}[name].default
    if isinstance(ftype, tuple):
        return tuple(float(eval_fraction(t)) for t in text.replace(",", " ").split())
    if isinstance(ftype, bool):
        return text.strip().lower() in ("1", "true", "yes")
    if isinstance(ftype, int):
        return int(text)
    if isinstance(ftype, float):
        return float(eval_fraction(text))
    return text.strip()


def eval_fraction(text: str) -> float:
    """Parse ``0.25`` or ``1/3``."""
    text = text.strip()
    if "/" in text:
        a, b = text.split("/", 1)
        return float(a) / float(b)
    return float(text)


def load_config(path: str | os.PathLike | None = None, **overrides) -> RunConfig:
    """Read a flat ``key = value`` file (no sections) and apply overrides."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_string("[run]\n" + fh.read())
        known = {f.name for f in dataclasses.fields(RunConfig)}
        for key, text in parser["run"].items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _coerce(key, text)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

CONDITION_HEADER = ["level", "ndof", "kappa_A", "kappa_P", "lambda_min", "lambda_max",
                    "h_ratio", "ritz_min", "ritz_max", "pcg_iterations", "flops_per_dof",
                    "converged"]
DECOMPOSITION_HEADER = ["depth", "ndof", "sample", "theta", "q", "norm2", "norm3", "ratio",
                        "lower_bound_ratio", "stable_ratio", "stable_ratio_h", "szzero_defect"]
ADAPT_HEADER = ["iteration", "ndof", "elements", "eta", "pcg_iterations", "residual",
                "t_assemble", "t_solve", "t_estimate"]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[list], error: str | None = None):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        if error is not None:
            w.writerow(["error", error.replace("\n", " ")])


def read_csv_rows(path) -> tuple[list[str], list[list[str]], str | None]:
    """Header, data rows and the error trailer (if any) of an emitted CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    err = None
    if body and body[-1] and body[-1][0] == "error":
        err = body[-1][1] if len(body[-1]) > 1 else ""
        body = body[:-1]
    return header, body, err


def export_mesh(mesh: MeshView, path) -> None:
    write_mesh(mesh, path)


def export_matrix(M, path) -> None:
    """Dense matrix as CSV: header ``c0,...,c{n-1}``, one row per line."""
    M = np.atleast_2d(np.asarray(M.toarray() if hasattr(M, "toarray") else M, dtype=float))
    _write_csv(Path(path), [f"c{j}" for j in range(M.shape[1])], M.tolist())


def export_vector(v, path) -> None:
    """Vector as CSV with header ``value``."""
    v = np.asarray(v, dtype=float).ravel()
    _write_csv(Path(path), ["value"], [[x] for x in v.tolist()])


def import_matrix(path) -> np.ndarray:
    header, body, _ = read_csv_rows(path)
    if not all(h == f"c{j}" for j, h in enumerate(header)):
        raise ValueError("not a matrix CSV")
    return np.array([[float(x) for x in r] for r in body], dtype=float).reshape(-1, len(header))


def import_vector(path) -> np.ndarray:
    header, body, _ = read_csv_rows(path)
    if header != ["value"]:
        raise ValueError("not a vector CSV")
    return np.array([float(r[0]) for r in body], dtype=float)


def fit_loglog_slope(n, y) -> float:
    """Least-squares slope of log y against log n."""
    return float(np.polyfit(np.log(np.asarray(n, float)), np.log(np.asarray(y, float)), 1)[0])


# ---------------------------------------------------------------------------
# condition numbers
# ---------------------------------------------------------------------------

@dataclass
class ConditionRow:
    level: int
    ndof: int
    kappa_A: float
    kappa_P: float
    lambda_min: float
    lambda_max: float
    h_ratio: float
    ritz_min: float = float("nan")
    ritz_max: float = float("nan")
    pcg_iterations: int = 0
    flops_per_dof: float = float("nan")
    converged: bool = True

    def __post_init__(self):
        for name in ("ndof", "kappa_A", "kappa_P", "lambda_min", "lambda_max", "h_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def as_list(self) -> list:
        return [getattr(self, k) for k in CONDITION_HEADER]


@dataclass
class ConditionResult:
    rows: list[ConditionRow]
    csv_path: Path
    plot_path: Path
    elapsed: float
    final_mesh: MeshView | None = None


def _condition_row(level: int, A: np.ndarray, prec, config: RunConfig, mesh: MeshView,
                   pcg_iterations: int = 0) -> ConditionRow:
    plain = condition_report(A, None, tol=config.eig_tol, max_iter=config.eig_max_iter,
                             seed=config.seed)
    rep = condition_report(A, prec, tol=config.eig_tol, max_iter=config.eig_max_iter,
                           seed=config.seed)
    prec.apply(np.ones(A.shape[0]))
    d = mesh.diameters
    return ConditionRow(level, A.shape[0], plain.kappa, rep.kappa, rep.lambda_min,
                        rep.lambda_max, float(d.max() / d.min()), rep.ritz_min, rep.ritz_max,
                        pcg_iterations, prec.flops_last / A.shape[0],
                        bool(plain.converged and rep.converged))


def _plot_script(csv_path: Path, title: str) -> Path:
    plot = csv_path.with_suffix(".gp")
    name = csv_path.name
    png = csv_path.with_suffix(".png").name
    plot.write_text(
        "set datafile separator ','\n"
        "set terminal pngcairo size 800,600\n"
        f"set output '{png}'\n"
        "set logscale xy\n"
        "set xlabel 'N'\n"
        "set ylabel 'condition number'\n"
        f"set title '{title}'\n"
        "set key top left\n"
        f"plot '{name}' every ::1 using 2:3 with linespoints title 'kappa(A)', \\\n"
        f"     '{name}' every ::1 using 2:4 with linespoints title 'kappa(P)'\n")
    return plot


def _run_adaptive_only(config: RunConfig, observer=None):
    est = EstimatorConfig(theta=config.theta, s=config.s)
    return adaptive_loop(config.domain, config.params, est, max_dofs=config.max_dofs,
                         initial_refinements=config.initial_refinements, quad=config.quad,
                         solver_tol=config.solver_tol, family=config.fe_family,
                         observer=observer)


def run_condition_experiment(config: RunConfig, csv_name: str | None = None,
                             final_mesh: MeshView | None = None) -> ConditionResult:
    """Condition numbers of A and of the preconditioned operator per level.

    Writes ``condition_<hierarchy>_<family>_s<s>.csv`` and a gnuplot script
    next to it.  For the fcc hierarchy ``final_mesh`` replaces the adaptive
    run that would otherwise produce the finest mesh.  On failure the rows computed so far are written followed by an
    ``error`` row and :class:`ExperimentError` is raised.
    """
    t0 = time.perf_counter()
    out = Path(config.out)
    csv_path = out / (csv_name or f"condition_{config.hierarchy}_{config.family}_s{config.s:g}.csv")
    rows: list[ConditionRow] = []
    final = None
    try:
        if config.hierarchy == "adaptive":
            def observer(rec, A, prec):
                rows.append(_condition_row(len(rows), A, prec, config, rec.mesh, rec.iterations))
                log.info("level %d N=%d kappa_A=%.3g kappa_P=%.3g", rows[-1].level,
                         rows[-1].ndof, rows[-1].kappa_A, rows[-1].kappa_P)

            records, H = _run_adaptive_only(config, observer)
            final = H.levels[-1]
        elif config.hierarchy == "fcc":
            if final_mesh is None:
                _, H = _run_adaptive_only(config)
                final_mesh = H.levels[-1]
            final = final_mesh
            F = build_fcc_hierarchy(final)
            cache = DiagonalCache(config.params, config.quad)
            for l, mesh in enumerate(F.levels):
                space = build_space(mesh, config.fe_family)
                if space.ndof == 0:
                    continue
                A = assemble_stiffness(space, config.params, config.quad)
                sub = Hierarchy(F.forest, F.levels[:l + 1], "fcc")
                prec = build_preconditioner(sub, config.params, config.fe_family, config.quad,
                                            cache)
                rows.append(_condition_row(l, A, prec, config, mesh))
        else:
            mesh = uniform_refine(make_initial_mesh(config.domain), config.initial_refinements)
            levels = [mesh]
            cache = DiagonalCache(config.params, config.quad)
            while True:
                space = build_space(levels[-1], config.fe_family)
                if space.ndof > config.max_dofs:
                    break
                if space.ndof > 0:
                    A = assemble_stiffness(space, config.params, config.quad)
                    H = Hierarchy(mesh.forest, list(levels), "uniform")
                    prec = build_preconditioner(H, config.params, config.fe_family,
                                                config.quad, cache)
                    rows.append(_condition_row(len(levels) - 1, A, prec, config, levels[-1]))
                levels.append(uniform_refine(levels[-1], 1))
            final = levels[-2] if len(levels) > 1 else levels[0]
    except Exception as exc:
        _write_csv(csv_path, CONDITION_HEADER, [r.as_list() for r in rows],
                   error=f"{type(exc).__name__}: {exc}")
        raise ExperimentError(f"condition experiment failed after {len(rows)} levels: {exc}") \
            from exc
    _write_csv(csv_path, CONDITION_HEADER, [r.as_list() for r in rows])
    plot = _plot_script(csv_path, f"{config.hierarchy} hierarchy, s = {config.s:g}")
    return ConditionResult(rows, csv_path, plot, time.perf_counter() - t0, final)


def run_adaptive(config: RunConfig, csv_name: str | None = None):
    """Plain adaptive loop; writes per-iteration data and the final mesh."""
    out = Path(config.out)
    csv_path = out / (csv_name or f"adapt_{config.family}_s{config.s:g}.csv")
    records, H = _run_adaptive_only(config)
    rows = [[i, r.ndof, len(r.mesh), r.eta, r.iterations, r.residual,
             r.timing.get("assemble", 0.0), r.timing.get("solve", 0.0),
             r.timing.get("estimate", 0.0)] for i, r in enumerate(records)]
    _write_csv(csv_path, ADAPT_HEADER, rows)
    export_mesh(H.levels[-1], csv_path.with_suffix(".mesh"))
    return records, H, csv_path


# ---------------------------------------------------------------------------
# Scott-Zhang diagnostics
# ---------------------------------------------------------------------------

def random_nvb_mesh(domain: str, rng: np.random.Generator, depth: int,
                    frac: float = 0.3, forest_mesh: MeshView | None = None) -> MeshView:
    """Random NVB refinement: mark random elements until the generation exceeds ``depth``.

    Elements at generation ``depth`` are never marked, so the result has
    generations at most ``depth + 1`` (closure may add one).  With
    ``forest_mesh`` the refinement starts there (same forest).
    """
    mesh = forest_mesh if forest_mesh is not None else make_initial_mesh(domain)
    for _ in range(4 * depth):
        gens = mesh.generations
        cand = [e for e, g in zip(mesh.elements, gens.tolist()) if g < depth - 1]
        if not cand:
            break
        k = max(1, int(frac * len(cand)))
        marked = rng.choice(cand, size=min(k, len(cand)), replace=False)
        mesh = refine(mesh, marked.tolist())
    return mesh


def _all_vertices_xy(*meshes: MeshView) -> np.ndarray:
    ids = np.unique(np.concatenate([m.vertex_ids for m in meshes]))
    return meshes[0].coords[ids]


def sz_coincidence_defect(T: MeshView, us: np.ndarray, family: str = "p1") -> list[float]:
    """Per level l: max over the given u of max |I~_l u - I^_l u| at all vertices.

    ``us`` (k, ndof) holds coefficient vectors on ``T``.  Both functions are
    evaluated at the vertices of the uniform and of the coarsened mesh.
    """
    src = build_space(T, family)
    out = []
    for l in range(required_depth(T) + 1):
        hat_mesh = uniform_mesh(T.forest, l)
        tilde_mesh = fcc(T, hat_mesh)
        hat, tilde = assign_averaging(T, hat_mesh, tilde_mesh)
        sh, st = build_space(hat_mesh, family), build_space(tilde_mesh, family)
        Mh, Mt = scott_zhang_matrix(sh, hat, src), scott_zhang_matrix(st, tilde, src)
        pts = _all_vertices_xy(hat_mesh, tilde_mesh)
        U = np.atleast_2d(us).T
        vh = evaluation_matrix(sh, pts) @ (Mh @ U)
        vt = evaluation_matrix(st, pts) @ (Mt @ U)
        out.append(float(np.max(np.abs(vh - vt))) if vh.size else 0.0)
    return out


def szzero_defect(T: MeshView, us: np.ndarray, family: str = "p1",
                  hierarchy: Hierarchy | None = None) -> list[float]:
    """Per level l >= 1: max |(I~_l - I~_{l-1}) u (z)| over nodes z outside M~_l."""
    H = hierarchy or build_fcc_hierarchy(T)
    src = build_space(T, family)
    assignments = assign_averaging_leveled(T, H, family)
    spaces = [build_space(m, family) for m in H.levels]
    mats = [scott_zhang_matrix(sp_, avg, src) for sp_, avg in zip(spaces, assignments)]
    out = []
    for l in range(1, len(spaces)):
        P = prolongation(spaces[l - 1], spaces[l])
        marked = set(level_marked_nodes(H, l, family).tolist())
        keep = np.array([z not in marked for z in spaces[l].nodes.tolist()], dtype=bool)
        worst = 0.0
        for u in np.atleast_2d(us):
            diff = mats[l] @ u - P @ (mats[l - 1] @ u)
            if np.any(keep):
                worst = max(worst, float(np.max(np.abs(diff[keep]))))
        out.append(worst)
    return out


# ---------------------------------------------------------------------------
# decomposition diagnostic
# ---------------------------------------------------------------------------

@dataclass
class DecompositionRow:
    depth: int
    ndof: int
    sample: int
    theta: float
    q: float
    norm2: float
    norm3: float
    ratio: float
    lower_bound_ratio: float
    stable_ratio: float
    stable_ratio_h: float
    szzero_defect: float

    def as_list(self) -> list:
        return [getattr(self, k) for k in DECOMPOSITION_HEADER]


def _lq(values: np.ndarray, q: float) -> float:
    values = np.abs(np.asarray(values, dtype=float))
    if not len(values):
        return 0.0
    if np.isinf(q):
        return float(values.max())
    return float(np.sum(values ** q) ** (1.0 / q))


def multilevel_norms(u: np.ndarray, H: Hierarchy, mats, spaces, M: np.ndarray,
                     thetas, q: float) -> dict:
    """norm2 and norm3 for each theta, plus the L2 distances ||u - I~_l u||.

    ``mats[l]`` maps coefficients on the finest space to I~_l u on level l and
    ``M`` is the finest mass matrix.
    """
    L = len(spaces) - 1
    # lift every I~_l u to the finest space
    lifts = []
    for l in range(L + 1):
        v = mats[l] @ u
        for k in range(l + 1, L + 1):
            v = prolongation(spaces[k - 1], spaces[k]) @ v
        lifts.append(v)
    nrm = lambda w: float(np.sqrt(max(w @ (M @ w), 0.0)))
    base = nrm(lifts[0])
    dist = np.array([nrm(u - lifts[l]) for l in range(L + 1)])
    qd = np.array([nrm(lifts[l + 1] - lifts[l]) for l in range(L)])
    out = {"dist": dist}
    for th in thetas:
        w2 = 2.0 ** (1.5 * th * np.arange(L + 1))
        w3 = 2.0 ** (1.5 * th * np.arange(L))
        out[th] = (base + _lq(w2 * dist, q), base + _lq(w3 * qd, q))
    return out


def run_decomposition_diagnostic(config: RunConfig, csv_name: str | None = None,
                                 final_mesh: MeshView | None = None) -> list[DecompositionRow]:
    """Norm-equivalence ratios and stable-decomposition ratios per depth.

    The depth-L mesh is the final adaptive mesh chopped at generation 2L;
    its fcc hierarchy has L + 1 levels.  For every depth ``decomp_samples``
    random u with standard normal coefficients are drawn.
    """
    if config.family != "p1":
        raise ValueError("the decomposition diagnostic needs the p1 family")
    out = Path(config.out)
    csv_path = out / (csv_name or f"decomposition_s{config.s:g}.csv")
    rows: list[DecompositionRow] = []
    try:
        if final_mesh is None:
            sub = config.with_overrides(max_dofs=config.decomp_max_dofs)
            _, Hf = _run_adaptive_only(sub)
            final_mesh = Hf.levels[-1]
        rng = np.random.default_rng(config.seed)
        params, quad = config.params, config.quad
        cache = DiagonalCache(params, quad)
        max_depth = min(config.decomp_max_depth, required_depth(final_mesh))
        for L in range(0, max_depth + 1):
            T = chop(final_mesh, L)
            H = build_fcc_hierarchy(T, L)
            space = build_space(T, "p1_zero_bc")
            if space.ndof == 0:
                continue
            assignments = assign_averaging_leveled(T, H, "p1_zero_bc")
            spaces = [build_space(m, "p1_zero_bc") for m in H.levels]
            mats = [scott_zhang_matrix(sp_, avg, space) for sp_, avg in zip(spaces, assignments)]
            M = mass_matrix(space).toarray()
            A = assemble_stiffness(space, params, quad)
            hat = np.array([H.hat_h(l) for l in range(L + 1)])
            for k in range(config.decomp_samples):
                u = rng.standard_normal(space.ndof)
                norms = multilevel_norms(u, H, mats, spaces, M, config.decomp_thetas,
                                         config.decomp_q)
                au = float(u @ A @ u)
                lower = float(np.sum(hat ** (-2 * params.s) * norms["dist"] ** 2) / au)
                dec = stable_decomposition(CoefVector(space, u), H, assignments, A, params,
                                           cache)
                for th in config.decomp_thetas:
                    n2, n3 = norms[th]
                    rows.append(DecompositionRow(L, space.ndof, k, th, config.decomp_q, n2, n3,
                                                 n2 / n3, lower, dec.ratio_diag, dec.ratio,
                                                 dec.szzero_defect))
    except Exception as exc:
        _write_csv(csv_path, DECOMPOSITION_HEADER, [r.as_list() for r in rows],
                   error=f"{type(exc).__name__}: {exc}")
        raise ExperimentError(f"decomposition diagnostic failed: {exc}") from exc
    _write_csv(csv_path, DECOMPOSITION_HEADER, [r.as_list() for r in rows])
    return rows


# ---------------------------------------------------------------------------
# property suite
# ---------------------------------------------------------------------------

@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seed: int


@dataclass
class PropertyReport:
    results: list[PropertyResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def pass_set(self) -> frozenset[str]:
        return frozenset(r.name for r in self.results if r.passed)

    def summary(self) -> dict:
        return {"passed": self.passed,
                "results": [dataclasses.asdict(r) for r in self.results]}


def _check_fcc(rng, seed, n_pairs=20, depth=6) -> PropertyResult:
    for i in range(n_pairs):
        base = make_initial_mesh("unit_square")
        a = random_nvb_mesh("unit_square", rng, int(rng.integers(1, depth + 1)), forest_mesh=base)
        b = random_nvb_mesh("unit_square", rng, int(rng.integers(1, depth + 1)), forest_mesh=base)
        b1, b2, b3 = fcc_parts(a, b)
        o1, o2, o3 = fcc_bruteforce(a, b)
        c = fcc(a, b)
        area = float(c.areas.sum())
        if (b1, b2, b3) != (o1, o2, o3):
            return PropertyResult("fcc_oracle", False, f"pair {i}: sets differ", seed)
        if len(b1) + len(b2) + len(b3) != len(c) or fcc(b, a) != c or abs(area - 1.0) > 1e-12:
            return PropertyResult("fcc_oracle", False, f"pair {i}: structure violated", seed)
    return PropertyResult("fcc_oracle", True, f"{n_pairs} pairs", seed)


def _check_sz(rng, seed, n_u=5) -> list[PropertyResult]:
    T = random_nvb_mesh("unit_square", rng, 7)
    us = rng.standard_normal((n_u, build_space(T, "p1").ndof))
    d1 = max(sz_coincidence_defect(T, us, "p1"))
    d2 = max(szzero_defect(T, us, "p1"))
    return [PropertyResult("sz_coincidence", d1 <= 1e-12, f"max defect {d1:.2e}", seed),
            PropertyResult("sz_zero", d2 <= 1e-12, f"max defect {d2:.2e}", seed)]


def _check_completion(rng, seed, inject_fault: str | None, n_cases=5) -> list[PropertyResult]:
    closure = inject_fault != "skip_closure"
    ok_min, ok_hang = True, True
    detail_min, detail_hang = "", ""
    for i in range(n_cases):
        mesh = make_initial_mesh("unit_square")
        if i % 2:
            mesh = refine(mesh, [mesh.elements[int(rng.integers(len(mesh)))]])
        k = int(rng.integers(1, 3))
        marked = rng.choice(mesh.elements, size=k, replace=False).tolist()
        fine = refine(mesh, marked, closure=closure)
        if hanging_nodes(fine):
            ok_hang = False
            detail_hang = f"case {i}: hanging nodes {hanging_nodes(fine)}"
        res = completion_bruteforce(mesh, marked, depth=2)
        if not (res.unique and res.coarsest and res.minimal == fine):
            ok_min = False
            detail_min = f"case {i}: refinement differs from the enumerated minimal completion"
    return [PropertyResult("no_hanging_nodes", ok_hang, detail_hang or f"{n_cases} cases", seed),
            PropertyResult("minimal_completion", ok_min, detail_min or f"{n_cases} cases", seed)]


def _check_spd(seed) -> PropertyResult:
    mesh = uniform_refine(make_initial_mesh("l_shape"), 1)
    worst = np.inf
    for s in (0.25, 0.75):
        A = assemble_stiffness(build_space(mesh, "p1_zero_bc"), FracParams(s))
        sym = np.max(np.abs(A - A.T)) / np.max(np.abs(A))
        try:
            L = np.linalg.cholesky(A)
            worst = min(worst, float(np.min(np.diag(L))))
        except np.linalg.LinAlgError:
            return PropertyResult("spd", False, f"s={s}: Cholesky failed", seed)
        if sym > 1e-12:
            return PropertyResult("spd", False, f"s={s}: asymmetry {sym:.2e}", seed)
    return PropertyResult("spd", True, f"min Cholesky pivot {worst:.3e}", seed)


def _two_triangle_square() -> MeshView:
    f = RefinementForest(np.array([(0, 0), (1, 0), (1, 1), (0, 1)], dtype=float),
                         [(1, 2, 0), (3, 0, 2)])
    return MeshView(f, f.roots)


def _check_quadrature(seed) -> PropertyResult:
    space = build_space(_two_triangle_square(), "p0")
    p = FracParams(0.25)
    ref = stiffness_oracle(space, p, n_x=8, m_theta=16)
    A = assemble_stiffness(space, p, QuadConfig(gauss_order=8))
    err = float(np.max(np.abs(A - ref.matrix) / np.abs(ref.matrix)))
    return PropertyResult("quadrature_oracle", err <= 1e-4, f"max relative error {err:.2e}",
                          seed)


def run_property_suite(config: RunConfig | None = None, inject_fault: str | None = None,
                       include_slow: bool = True) -> PropertyReport:
    """Run the invariant checks; each result records the seed used."""
    config = config or RunConfig()
    seed = config.seed
    rng = np.random.default_rng(seed)
    report = PropertyReport()
    checks = [lambda: [_check_fcc(rng, seed)],
              lambda: _check_sz(rng, seed),
              lambda: _check_completion(rng, seed, inject_fault)]
    if include_slow:
        checks += [lambda: [_check_spd(seed)], lambda: [_check_quadrature(seed)]]
    for chk in checks:
        try:
            report.results.extend(chk())
        except Exception as exc:     # a crash counts as a failure of that check
            report.results.append(PropertyResult(getattr(chk, "__name__", "check"), False,
                                                 f"{type(exc).__name__}: {exc}", seed))
    return report


from .oracles import completion_bruteforce, fcc_bruteforce, stiffness_oracle  # noqa: E402
