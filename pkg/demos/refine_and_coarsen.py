"""Newest-vertex bisection, finest common coarsening and the fcc hierarchy."""
import numpy as np

from fracml.hierarchy import build_fcc_hierarchy, fcc, fcc_parts
from fracml.mesh import hanging_nodes, make_initial_mesh, refine, shape_regularity

rng = np.random.default_rng(0)
mesh = make_initial_mesh("l_shape")
for step in range(6):
    marked = rng.choice(mesh.elements, size=max(1, len(mesh) // 4), replace=False)
    mesh = refine(mesh, marked.tolist())
    print(f"step {step}: {len(mesh):4d} elements, hanging nodes {len(hanging_nodes(mesh))}, "
          f"shape regularity {shape_regularity(mesh):.2f}")

b1, b2, b3 = fcc_parts(mesh, refine(mesh, mesh.elements[:5]))
print(f"fcc of a mesh and a local refinement of it: {len(b1)} + {len(b2)} + {len(b3)} elements")

H = build_fcc_hierarchy(mesh)
for l, level in enumerate(H.levels):
    print(f"level {l}: {len(level):4d} elements, hat h {H.hat_h(l):.4f}")
