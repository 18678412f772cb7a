"""Adaptive solution of (-Delta)^s u = 1 on the L-shape with the multilevel PCG."""
from fracml.adaptive import EstimatorConfig, adaptive_loop
from fracml.experiments import fit_loglog_slope
from fracml.kernel import FracParams

s = 0.5
records, H = adaptive_loop("l_shape", FracParams(s), EstimatorConfig(s=s, theta=0.5),
                           max_dofs=400)
for i, r in enumerate(records):
    print(f"{i:2d}  N {r.ndof:5d}  eta {r.eta:.4e}  PCG iterations {r.iterations:3d}")
rate = fit_loglog_slope([r.ndof for r in records], [r.eta for r in records])
print(f"fitted rate of eta in N: {rate:.3f}")
