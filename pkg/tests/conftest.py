import numpy as np
import pytest
from hypothesis import settings

from iphosm.assembly import assemble_system
from iphosm.mesh import generate_structured_mesh, partition_boxes

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


def build(nx, boxes=(2, 1), k=1, eta=0.0, f=None, ny=None, **kw):
    mesh = generate_structured_mesh(nx, ny or nx)
    part = partition_boxes(mesh, *boxes)
    return assemble_system(mesh, part, k, eta, f=f, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sys2():
    """4x4 cells, two subdomains, k=1, eta=1, unit load."""
    return build(4, (2, 1), k=1, eta=1.0, f=lambda x, y: np.ones_like(x))


@pytest.fixture(scope="session")
def sys4_floating():
    """6x6 cells, 3x3 boxes (center floating), k=1, eta=0."""
    return build(6, (3, 3), k=1, eta=0.0, f=lambda x, y: np.ones_like(x))


def volume_points(system, i):
    """Physical node and element centroid of every volume dof of subdomain i."""
    mesh, space = system.mesh, system.space
    els = space.elements[i]
    p = mesh.vertices[mesh.triangles[els]]
    B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    nodes = p[:, 0][:, None, :] + np.einsum("eij,nj->eni", B, space.ref.nodes)
    cent = np.repeat(p.mean(axis=1)[:, None, :], space.local_dim, axis=1)
    return np.concatenate([nodes, cent], axis=2).reshape(-1, 4)


def trace_points(system, i):
    """Physical node and edge midpoint of every trace dof in Lambda_i."""
    mesh, space = system.mesh, system.space
    edges = system.part.gamma_edges[i]
    a = mesh.vertices[mesh.edges[edges, 0]]
    b = mesh.vertices[mesh.edges[edges, 1]]
    t = space.trace.nodes
    nodes = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    mid = np.repeat((0.5 * (a + b))[:, None, :], len(t), axis=1)
    return np.concatenate([nodes, mid], axis=2).reshape(-1, 4)


def match(src, dst):
    """Permutation p with dst[p[a]] == src[a] (rows compared after rounding)."""
    key = {tuple(np.round(r, 10)): n for n, r in enumerate(dst)}
    return np.array([key[tuple(np.round(r, 10))] for r in src])


def point_reflect(x):
    """(x, y) -> (1 - x, 1 - y) on every coordinate pair of a row."""
    return 1.0 - x


ACCEPTANCE = {}
INFO = []


def record(criterion: int, passed: bool, detail: str, status: str | None = None):
    """Store the one-line verdict for an acceptance criterion."""
    ACCEPTANCE[criterion] = f"{status or ('PASS' if passed else 'FAIL')}  criterion {criterion:2d}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[c])
    for line in INFO:
        terminalreporter.write_line(f"INFO  {line}")
