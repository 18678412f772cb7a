import numpy as np
import pytest

from fracml.mesh import MeshView, RefinementForest, make_initial_mesh, refine


def two_triangle_square() -> MeshView:
    f = RefinementForest(np.array([(0, 0), (1, 0), (1, 1), (0, 1)], dtype=float),
                         [(1, 2, 0), (3, 0, 2)])
    return MeshView(f, f.roots)


def random_refinement(mesh: MeshView, rng: np.random.Generator, steps: int,
                      frac: float = 0.25) -> MeshView:
    for _ in range(steps):
        k = max(1, int(frac * len(mesh)))
        marked = rng.choice(np.array(mesh.elements), size=k, replace=False)
        mesh = refine(mesh, marked.tolist())
    return mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def square():
    return make_initial_mesh("unit_square")


@pytest.fixture
def lshape():
    return make_initial_mesh("l_shape")


# acceptance verdicts: criterion number -> list of (passed, detail)
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 12):
        parts = ACCEPTANCE.get(k)
        if parts is None:
            terminalreporter.write_line(f"criterion {k:2d}: NOT RUN")
            continue
        ok = all(p for p, _ in parts)
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  "
                                    + "; ".join(d for _, d in parts))
