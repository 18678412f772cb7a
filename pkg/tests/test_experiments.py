"""Configuration, CSV export, experiment runners and the property suite."""
import re

import numpy as np
import pytest

import fracml.experiments as ex
from fracml.experiments import (ADAPT_HEADER, CONDITION_HEADER, DECOMPOSITION_HEADER,
                                ExperimentError, RunConfig, export_matrix, export_mesh,
                                export_vector, fit_loglog_slope, import_matrix, import_vector,
                                load_config, read_csv_rows, run_adaptive,
                                run_condition_experiment, run_decomposition_diagnostic,
                                run_property_suite)
from fracml.fem import build_space
from fracml.kernel import assemble_stiffness
from fracml.mesh import read_mesh, uniform_refine

from conftest import random_refinement


# ---------------------------------------------------------------- config

def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("s = 0.4\nfamily = p0\ndecomp_thetas = 1/3 2/3\nmax_dofs = 300\n")
    cfg = load_config(path, seed=7)
    assert cfg.s == 0.4 and cfg.family == "p0" and cfg.max_dofs == 300 and cfg.seed == 7
    assert cfg.decomp_thetas == pytest.approx((1 / 3, 2 / 3))
    assert cfg.fe_family == "p0" and RunConfig().fe_family == "p1_zero_bc"
    assert load_config(path, s=0.1, family=None).s == 0.1


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ValueError):
        RunConfig(family="p0", s=0.5)
    with pytest.raises(ValueError):
        RunConfig(theta=0.0)
    with pytest.raises(ValueError):
        RunConfig(theta=1.5)
    with pytest.raises(ValueError):
        RunConfig(hierarchy="random")
    with pytest.raises(ValueError):
        RunConfig(s=1.0)
    assert RunConfig(theta=1.0).theta == 1.0
    assert RunConfig(family="p0", s=0.49).s == 0.49
    path = tmp_path / "bad.cfg"
    path.write_text("colour = blue\n")
    with pytest.raises(ValueError):
        load_config(path)


# ---------------------------------------------------------------- CSV

def test_mesh_export_roundtrip(tmp_path, lshape, rng):
    mesh = random_refinement(lshape, rng, 4)
    path = tmp_path / "mesh.txt"
    export_mesh(mesh, path)
    xy, tri, _ = read_mesh(path)
    key = lambda pts: frozenset(tuple(map(tuple, np.round(p, 14))) for p in pts)
    got = {frozenset(map(tuple, p)) for p in xy[tri]}
    want = {frozenset(map(tuple, p)) for p in mesh.points}
    assert got == want
    assert key(xy[tri]) == key(mesh.points)


def test_matrix_and_vector_export_bit_exact(tmp_path, rng):
    M = rng.standard_normal((5, 7)) * np.logspace(-300, 300, 7)
    M[0, 0] = np.pi
    export_matrix(M, tmp_path / "m.csv")
    back = import_matrix(tmp_path / "m.csv")
    assert back.dtype == np.float64 and np.array_equal(back, M)
    header, body, err = read_csv_rows(tmp_path / "m.csv")
    assert header == [f"c{j}" for j in range(7)] and len(body) == 5 and err is None
    v = rng.standard_normal(11) / 3.0
    export_vector(v, tmp_path / "v.csv")
    assert np.array_equal(import_vector(tmp_path / "v.csv"), v)
    with pytest.raises(ValueError):
        import_vector(tmp_path / "m.csv")


def test_error_trailer_roundtrip(tmp_path):
    path = tmp_path / "e.csv"
    ex._write_csv(path, ["a", "b"], [[1, 0.5]], error="boom\nsecond line")
    header, body, err = read_csv_rows(path)
    assert header == ["a", "b"] and body == [["1", "0.5"]]
    assert err == "boom second line"


def test_loglog_slope():
    n = np.array([10, 100, 1000])
    assert fit_loglog_slope(n, 3 * n ** 0.75) == pytest.approx(0.75)


# ---------------------------------------------------------------- condition runs

def _tiny(tmp_path, **kw):
    base = dict(domain="unit_square", hierarchy="uniform", s=0.5, max_dofs=3,
                out=str(tmp_path))
    base.update(kw)
    return RunConfig(**base)


def test_condition_single_level_is_jacobi(tmp_path):
    cfg = _tiny(tmp_path, max_dofs=5, eig_tol=1e-10, eig_max_iter=20000)
    res = run_condition_experiment(cfg)
    assert len(res.rows) == 1
    row = res.rows[0]
    A = assemble_stiffness(build_space(res.final_mesh, "p1_zero_bc"), cfg.params, cfg.quad)
    ev = np.linalg.eigvalsh(A)
    d = 1 / np.sqrt(np.diag(A))
    evj = np.linalg.eigvalsh(d[:, None] * A * d[None, :])
    assert row.ndof == 5 and row.converged
    assert row.kappa_A == pytest.approx(ev[-1] / ev[0], rel=1e-4)
    assert row.kappa_P == pytest.approx(evj[-1] / evj[0], rel=1e-4)
    header, body, err = read_csv_rows(res.csv_path)
    assert header == CONDITION_HEADER and len(body) == 1 and err is None


def test_condition_uniform_levels(tmp_path):
    res = run_condition_experiment(_tiny(tmp_path, max_dofs=130, s=0.75))
    assert [r.level for r in res.rows] == list(range(len(res.rows)))
    assert len(res.rows) >= 3
    n = [r.ndof for r in res.rows]
    assert n == sorted(n) and n[-1] <= 130
    for r in res.rows:
        assert r.kappa_P <= r.kappa_A * 1.5 + 1e-12 or r.ndof == 1
        assert 0 < r.lambda_min < r.lambda_max and 0 < r.ritz_min <= r.ritz_max
        assert r.flops_per_dof > 0


def test_condition_csv_is_deterministic(tmp_path):
    a = run_condition_experiment(_tiny(tmp_path / "a", max_dofs=30))
    b = run_condition_experiment(_tiny(tmp_path / "b", max_dofs=30))
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()


def test_plot_script_only_reads_csv(tmp_path):
    res = run_condition_experiment(_tiny(tmp_path, max_dofs=5))
    text = res.plot_path.read_text()
    names = set(re.findall(r"'([^']+\.[a-z]+)'", text))
    assert names == {res.csv_path.name, res.csv_path.with_suffix(".png").name}
    plots = re.findall(r"'([^']+)' every", text)
    assert plots and set(plots) == {res.csv_path.name}


def test_condition_failure_writes_partial_csv(tmp_path, monkeypatch):
    real = ex.assemble_stiffness
    calls = []

    def flaky(*a, **kw):
        calls.append(1)
        if len(calls) > 1:
            raise RuntimeError("injected")
        return real(*a, **kw)

    monkeypatch.setattr(ex, "assemble_stiffness", flaky)
    cfg = _tiny(tmp_path, max_dofs=60)
    with pytest.raises(ExperimentError):
        run_condition_experiment(cfg)
    header, body, err = read_csv_rows(tmp_path / "condition_uniform_p1_s0.5.csv")
    assert header == CONDITION_HEADER and len(body) == 1
    assert "injected" in err


def test_condition_fcc_hierarchy_small(tmp_path):
    res = run_condition_experiment(_tiny(tmp_path, hierarchy="fcc", max_dofs=40))
    assert res.rows and res.final_mesh is not None
    assert all(r.converged for r in res.rows)
    assert max(r.kappa_P for r in res.rows) < 10


def test_adapt_run_outputs(tmp_path):
    records, H, path = run_adaptive(_tiny(tmp_path, hierarchy="adaptive", max_dofs=40))
    header, body, err = read_csv_rows(path)
    assert header == ADAPT_HEADER and err is None and len(body) == len(records)
    ndofs = [int(r[1]) for r in body]
    # boundary-only refinements on the square must not stall the dof count
    assert ndofs[0] == 5 and all(b > a for a, b in zip(ndofs, ndofs[1:]))
    xy, tri, _ = read_mesh(path.with_suffix(".mesh"))
    assert len(tri) == len(H.levels[-1])


# ---------------------------------------------------------------- decomposition

def test_decomposition_depth0_norms_agree(tmp_path, square):
    cfg = _tiny(tmp_path, decomp_max_depth=2, decomp_samples=2)
    rows = run_decomposition_diagnostic(cfg, final_mesh=uniform_refine(square, 4))
    depths = sorted({r.depth for r in rows})
    assert depths == [0, 1, 2]
    for r in rows:
        if r.depth == 0:
            # u lies in the coarsest space: both norms reduce to ||u||
            assert r.norm2 == pytest.approx(r.norm3, rel=1e-12)
            assert r.stable_ratio > 0 and r.lower_bound_ratio >= 0
        assert r.szzero_defect <= 1e-12 and r.norm3 > 0
    assert len(rows) == 3 * 2 * len(cfg.decomp_thetas)
    header, body, err = read_csv_rows(tmp_path / "decomposition_s0.5.csv")
    assert header == DECOMPOSITION_HEADER and len(body) == len(rows) and err is None


def test_decomposition_requires_p1(tmp_path):
    with pytest.raises(ValueError):
        run_decomposition_diagnostic(_tiny(tmp_path, family="p0", s=0.25))


# ---------------------------------------------------------------- property suite

def test_property_suite_passes():
    report = run_property_suite(RunConfig(seed=3))
    assert report.passed, [r for r in report.results if not r.passed]
    assert report.pass_set == {"fcc_oracle", "sz_coincidence", "sz_zero", "no_hanging_nodes",
                               "minimal_completion", "spd", "quadrature_oracle"}
    assert all(r.seed == 3 for r in report.results)
    assert report.summary()["passed"] is True


def test_property_suite_detects_skipped_closure():
    report = run_property_suite(RunConfig(seed=0), inject_fault="skip_closure",
                                include_slow=False)
    failed = {r.name for r in report.results if not r.passed}
    assert "no_hanging_nodes" in failed and not report.passed


def test_property_suite_same_pass_set_over_seeds():
    sets = {run_property_suite(RunConfig(seed=k), include_slow=False).pass_set
            for k in range(10)}
    assert len(sets) == 1
    assert next(iter(sets)) == {"fcc_oracle", "sz_coincidence", "sz_zero",
                                "no_hanging_nodes", "minimal_completion"}


@pytest.mark.slow
@pytest.mark.parametrize("theta", [0.3, 0.7])
def test_preconditioner_band_other_marking_parameters(tmp_path, theta):
    res = run_condition_experiment(RunConfig(s=0.5, theta=theta, max_dofs=300,
                                             out=str(tmp_path)))
    kp = [r.kappa_P for r in res.rows]
    assert all(r.converged for r in res.rows) and len(kp) >= 4
    assert max(kp) <= 20.0
    assert max(kp[-4:]) / min(kp[-4:]) <= 1.5
