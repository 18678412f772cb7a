"""Condition numbers with and without the local multilevel preconditioner."""
import tempfile

from fracml.experiments import RunConfig, run_condition_experiment

with tempfile.TemporaryDirectory() as out:
    for hierarchy in ("adaptive", "uniform"):
        cfg = RunConfig(s=0.5, hierarchy=hierarchy, max_dofs=400, out=out)
        res = run_condition_experiment(cfg)
        print(f"{hierarchy} hierarchy")
        for r in res.rows:
            print(f"  N {r.ndof:5d}  kappa(A) {r.kappa_A:8.3f}  kappa(P) {r.kappa_P:6.3f}  "
                  f"flops/N {r.flops_per_dof:5.2f}")
