"""Assembly of the hybridizable interior penalty (IPH) system.

Volume unknowns are numbered element by element; within a subdomain the
elements keep their global order. Trace unknowns live on interface edges
only (the Dirichlet data on the domain boundary is zero) and use the
degree-``k`` Lagrange basis along the sorted vertex pair of each edge.

Block names follow the subdomain-blocked saddle form::

    [ A_I      A_IG ] [u]   [f]
    [ A_IG^T   A_G  ] [l] = [0]

with ``A_I = diag(A_i)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import CGResult, cg, factorize
from .mesh import BOUNDARY, Mesh, Partition
from .reference import LagrangeEdge, LagrangeTriangle, edge_rule, triangle_rule

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- penalty


def default_alpha(k: int, c: float = 2.0) -> float:
    """Penalty constant ``c (k + 1)(k + 2)``."""
    return c * (k + 1) * (k + 2)


@dataclass(frozen=True)
class PenaltyRule:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def mu(self, k, h_e):
        return penalty_mu(self, k, h_e)


def penalty_mu(rule: PenaltyRule, k: int, h_e):
    """Per-edge penalty ``alpha k^2 / h_e``."""
    h_e = np.asarray(h_e, dtype=float)
    if k < 1 or np.any(h_e <= 0):
        raise ValueError("need k >= 1 and positive edge lengths")
    mu = rule.alpha * k * k / h_e
    return float(mu) if mu.ndim == 0 else mu


# ---------------------------------------------------------------- spaces


class DgSpace:
    """Degree-``k`` broken polynomial space over a partitioned mesh plus the
    interface trace space."""

    def __init__(self, mesh: Mesh, part: Partition, k: int):
        self.mesh = mesh
        self.part = part
        self.k = k
        self.ref = LagrangeTriangle(k)
        self.trace = LagrangeEdge(k)
        self.local_dim = self.ref.dim
        self.trace_dim = k + 1
        self.elements = [part.elements_of(i) for i in range(part.n_subdomains)]
        self.position = np.empty(mesh.n_elements, dtype=np.int64)
        for els in self.elements:
            self.position[els] = np.arange(len(els))

        self.interface_edges = part.interface_edges
        self.edge_position = np.full(mesh.n_edges, -1, dtype=np.int64)
        self.edge_position[self.interface_edges] = np.arange(len(self.interface_edges))
        self._gamma_pos = []
        for i in range(part.n_subdomains):
            pos = np.full(mesh.n_edges, -1, dtype=np.int64)
            pos[part.gamma_edges[i]] = np.arange(len(part.gamma_edges[i]))
            self._gamma_pos.append(pos)

    @property
    def n_subdomains(self) -> int:
        return self.part.n_subdomains

    @property
    def n_trace_global(self) -> int:
        return len(self.interface_edges) * self.trace_dim

    def n_volume(self, i: int) -> int:
        return len(self.elements[i]) * self.local_dim

    def n_trace(self, i: int) -> int:
        return len(self.part.gamma_edges[i]) * self.trace_dim

    def volume_index(self, i: int) -> np.ndarray:
        """Global element-major dof ids of subdomain ``i``, in local order."""
        nd = self.local_dim
        return (self.elements[i][:, None] * nd + np.arange(nd)).ravel()

    def dof_range(self, i: int, element: int) -> range:
        if self.part.subdomain_of[element] != i:
            raise KeyError(f"element {element} is not in subdomain {i}")
        start = self.position[element] * self.local_dim
        return range(start, start + self.local_dim)

    def trace_range(self, i: int, edge: int) -> range:
        """Trace dofs of ``edge`` inside ``Lambda_i``."""
        p = self._gamma_pos[i][edge]
        if p < 0:
            raise KeyError(f"edge {edge} is not on the interface of subdomain {i}")
        return range(p * self.trace_dim, (p + 1) * self.trace_dim)

    def global_trace_range(self, edge: int) -> range:
        p = self.edge_position[edge]
        if p < 0:
            raise KeyError(f"edge {edge} is not an interface edge")
        return range(p * self.trace_dim, (p + 1) * self.trace_dim)

    def lambda_index(self, i: int) -> np.ndarray:
        """Map from ``Lambda_i`` dofs to single-valued ``Lambda_h`` dofs."""
        pos = self.edge_position[self.part.gamma_edges[i]]
        return (pos[:, None] * self.trace_dim + np.arange(self.trace_dim)).ravel()

    def local_trace_index(self, i: int, edges) -> np.ndarray:
        pos = self._gamma_pos[i][np.asarray(edges, dtype=np.int64)]
        return (pos[:, None] * self.trace_dim + np.arange(self.trace_dim)).ravel()


# ---------------------------------------------------------------- geometry


@dataclass
class _Geometry:
    v0: np.ndarray
    B: np.ndarray
    invB: np.ndarray
    det: np.ndarray
    centroid: np.ndarray


def _geometry(mesh: Mesh) -> _Geometry:
    p = mesh.vertices[mesh.triangles]
    B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    det = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
    return _Geometry(p[:, 0], B, np.linalg.inv(B), det, p.mean(axis=1))


def _edge_points(mesh: Mesh, edges, t):
    a = mesh.vertices[mesh.edges[edges, 0]]
    b = mesh.vertices[mesh.edges[edges, 1]]
    d = b - a
    length = np.hypot(d[:, 0], d[:, 1])
    pts = a[:, None, :] + t[None, :, None] * d[:, None, :]
    normal = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    return pts, length, normal, 0.5 * (a + b)


def _outward(normal, mid, geom, elems):
    s = np.sign(np.einsum("ed,ed->e", normal, mid - geom.centroid[elems]))
    return normal * s[:, None]


def _side_eval(ref: LagrangeTriangle, geom: _Geometry, elems, pts):
    xi = np.einsum("eij,eqj->eqi", geom.invB[elems], pts - geom.v0[elems][:, None, :])
    vals = ref.values(xi)
    gref = ref.gradients(xi)
    grads = np.einsum("eji,eqnj->eqni", geom.invB[elems], gref)
    return vals, grads


class _Builder:
    """COO accumulator for element-major volume matrices."""

    def __init__(self, n_rows, n_cols):
        self.shape = (n_rows, n_cols)
        self.rows, self.cols, self.vals = [], [], []

    def add(self, row_ids, col_ids, blocks):
        # row_ids (E, a), col_ids (E, b), blocks (E, a, b)
        r = np.broadcast_to(row_ids[:, :, None], blocks.shape)
        c = np.broadcast_to(col_ids[:, None, :], blocks.shape)
        self.rows.append(r.ravel())
        self.cols.append(c.ravel())
        self.vals.append(blocks.ravel())

    def tocsr(self):
        if not self.rows:
            return sp.csr_matrix(self.shape)
        m = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=self.shape,
        ).tocsr()
        m.sum_duplicates()
        return m


def _edge_classes(mesh: Mesh, part: Partition):
    left, right = mesh.edge_elements[:, 0], mesh.edge_elements[:, 1]
    interior = right != BOUNDARY
    lab = part.subdomain_of
    lr = np.where(interior, right, left)
    same = interior & (lab[left] == lab[lr])
    cut = interior & ~same
    return np.flatnonzero(same), np.flatnonzero(cut), np.flatnonzero(~interior)


def _edge_mu(mesh: Mesh, rule: PenaltyRule, k: int):
    return penalty_mu(rule, k, mesh.edge_lengths())


def _element_dofs(elems, nd):
    return elems[:, None] * nd + np.arange(nd)


# ---------------------------------------------------------------- kernels


def _volume_blocks(space: DgSpace, geom: _Geometry, elems):
    ref = space.ref
    pts, w = triangle_rule(2 * space.k)
    phi = ref.values(pts)
    dphi = ref.gradients(pts)
    mref = phi.T @ (w[:, None] * phi)
    sref = np.einsum("q,qai,qbj->ijab", w, dphi, dphi)
    det = np.abs(geom.det[elems])
    C = np.einsum("eik,ejk->eij", geom.invB[elems], geom.invB[elems])
    Mb = det[:, None, None] * mref[None]
    Kb = det[:, None, None] * np.einsum("eij,ijab->eab", C, sref)
    return Mb, Kb


def _face_blocks(space, geom, edges, mu, with_flux=True, weight_mu=True):
    """Interior-face blocks (LL, LR, RL, RR) of the local solver.

    With ``with_flux=False`` only the jump penalty ``c [u][v]`` is returned,
    ``c = mu`` (``weight_mu``) or 1.
    """
    mesh = space.mesh
    t, wt = edge_rule(space.k)
    pts, length, normal, mid = _edge_points(mesh, edges, t)
    L = mesh.edge_elements[edges, 0]
    R = mesh.edge_elements[edges, 1]
    n = _outward(normal, mid, geom, L)
    w = wt[None, :] * length[:, None]
    me = mu[edges][:, None]
    vL, gL = _side_eval(space.ref, geom, L, pts)
    vR, gR = _side_eval(space.ref, geom, R, pts)
    dL = np.einsum("eqni,ei->eqn", gL, n)
    dR = np.einsum("eqni,ei->eqn", gR, n)
    sides = ((vL, dL, 1.0), (vR, dR, -1.0))
    out = {}
    for p, (vp, dp, sp_) in enumerate(sides):
        for q, (vq, dq, sq) in enumerate(sides):
            Jp, Jq = sp_ * vp, sq * vq
            if with_flux:
                Fp, Fq = 0.5 * dp, 0.5 * dq
                Gp, Gq = sp_ * dp, sq * dq
                integrand = (
                    -np.einsum("eqa,eqb->eqab", Jp, Fq)
                    - np.einsum("eqa,eqb->eqab", Fp, Jq)
                    + 0.5 * me[:, :, None, None] * np.einsum("eqa,eqb->eqab", Jp, Jq)
                    - (0.5 / me)[:, :, None, None] * np.einsum("eqa,eqb->eqab", Gp, Gq)
                )
            else:
                c = me if weight_mu else np.ones_like(me)
                integrand = c[:, :, None, None] * np.einsum("eqa,eqb->eqab", Jp, Jq)
            out[p, q] = np.einsum("eq,eqab->eab", w, integrand)
    return L, R, out


def _one_sided(space, geom, edges, elems, mu):
    """Values, normal derivatives (outward from ``elems``), weights, mu."""
    mesh = space.mesh
    t, wt = edge_rule(space.k)
    pts, length, normal, mid = _edge_points(mesh, edges, t)
    n = _outward(normal, mid, geom, elems)
    v, g = _side_eval(space.ref, geom, elems, pts)
    dn = np.einsum("eqni,ei->eqn", g, n)
    w = wt[None, :] * length[:, None]
    psi = space.trace.values(t)
    return v, dn, w, mu[edges][:, None], psi


def _nitsche_blocks(v, dn, w, me):
    integrand = (
        me[:, :, None, None] * np.einsum("eqa,eqb->eqab", v, v)
        - np.einsum("eqa,eqb->eqab", v, dn)
        - np.einsum("eqa,eqb->eqab", dn, v)
    )
    return np.einsum("eq,eqab->eab", w, integrand)


# ---------------------------------------------------------------- local solver


def _restrict(Aglob, rows, cols=None):
    cols = rows if cols is None else cols
    return Aglob[rows][:, cols].tocsr()


def _local_global_matrices(space: DgSpace, rule: PenaltyRule, elems, mu):
    """Mass and (A - eta M) over the given elements, global element-major ids."""
    mesh, part = space.mesh, space.part
    geom = _geometry(mesh)
    nd = space.local_dim
    N = mesh.n_elements * nd
    in_set = np.zeros(mesh.n_elements, dtype=bool)
    in_set[elems] = True
    same, cut, bnd = _edge_classes(mesh, part)

    Mbld, Kbld = _Builder(N, N), _Builder(N, N)
    Mb, Kb = _volume_blocks(space, geom, elems)
    ids = _element_dofs(elems, nd)
    Mbld.add(ids, ids, Mb)
    Kbld.add(ids, ids, Kb)

    faces = same[in_set[mesh.edge_elements[same, 0]]]
    if faces.size:
        L, R, blocks = _face_blocks(space, geom, faces, mu)
        el = (L, R)
        for (p, q), blk in blocks.items():
            Kbld.add(_element_dofs(el[p], nd), _element_dofs(el[q], nd), blk)

    # weak Dirichlet on the subdomain boundary: domain boundary + interface
    e_side = [bnd, cut, cut]
    s_side = [mesh.edge_elements[bnd, 0], mesh.edge_elements[cut, 0], mesh.edge_elements[cut, 1]]
    for edges, owners in zip(e_side, s_side):
        keep = in_set[owners]
        edges, owners = edges[keep], owners[keep]
        if edges.size == 0:
            continue
        v, dn, w, me, _ = _one_sided(space, geom, edges, owners, mu)
        blk = _nitsche_blocks(v, dn, w, me)
        ids = _element_dofs(owners, nd)
        Kbld.add(ids, ids, blk)
    return Mbld.tocsr(), Kbld.tocsr()


def assemble_local(mesh: Mesh, part: Partition, space: DgSpace, rule: PenaltyRule, eta: float, i: int):
    """Return ``(A_i, M_i, K_i)`` with ``A_i = eta M_i + K_i``."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    mu = _edge_mu(mesh, rule, space.k)
    elems = space.elements[i]
    Mg, Kg = _local_global_matrices(space, rule, elems, mu)
    idx = space.volume_index(i)
    M = _restrict(Mg, idx)
    K = _restrict(Kg, idx)
    A = (eta * M + K).tocsr()
    return A, M, K


def assemble_local_direct(mesh, part, space, rule, eta, i):
    """``A_i`` with the reaction term folded into the volume integrand.

    Independent of the ``eta M + K`` split; used to cross-check it.
    """
    mu = _edge_mu(mesh, rule, space.k)
    elems = space.elements[i]
    geom = _geometry(mesh)
    ref = space.ref
    pts, w = triangle_rule(2 * space.k)
    phi = ref.values(pts)
    dphi = np.einsum("eji,qnj->eqni", geom.invB[elems], ref.gradients(pts))
    det = np.abs(geom.det[elems])
    blk = det[:, None, None] * (
        eta * np.einsum("q,qa,qb->ab", w, phi, phi)[None]
        + np.einsum("q,eqai,eqbi->eab", w, dphi, dphi)
    )
    nd = space.local_dim
    N = mesh.n_elements * nd
    bld = _Builder(N, N)
    ids = _element_dofs(elems, nd)
    bld.add(ids, ids, blk)
    _, Kg = _local_global_matrices(space, rule, elems, mu)
    Vg = bld.tocsr()
    idx = space.volume_index(i)
    # Kg includes volume stiffness; remove it and add the direct volume part
    _, Kvol = _volume_blocks(space, geom, elems)
    vb = _Builder(N, N)
    vb.add(ids, ids, Kvol)
    return _restrict(Kg - vb.tocsr() + Vg, idx)


def _coupling_global(space: DgSpace, rule: PenaltyRule, mu, owner_filter=None):
    """``a_iG(v, psi) = int (dv/dn - mu v) psi`` summed over both sides of
    every interface edge; rows element-major, columns ``Lambda_h``."""
    mesh, part = space.mesh, space.part
    geom = _geometry(mesh)
    nd, nt = space.local_dim, space.trace_dim
    _, cut, _ = _edge_classes(mesh, part)
    bld = _Builder(mesh.n_elements * nd, space.n_trace_global)
    for side in (0, 1):
        owners = mesh.edge_elements[cut, side]
        edges = cut
        if owner_filter is not None:
            keep = owner_filter[owners]
            edges, owners = edges[keep], owners[keep]
        if edges.size == 0:
            continue
        v, dn, w, me, psi = _one_sided(space, geom, edges, owners, mu)
        blk = np.einsum("eq,eqa,qc->eac", w, dn - me[:, :, None] * v, psi)
        cols = space.edge_position[edges][:, None] * nt + np.arange(nt)
        bld.add(_element_dofs(owners, nd), cols, blk)
    return bld.tocsr()


def assemble_coupling(mesh: Mesh, part: Partition, space: DgSpace, rule: PenaltyRule, i: int):
    """``A_iG``: volume dofs of subdomain ``i`` by trace dofs of ``Lambda_i``."""
    mu = _edge_mu(mesh, rule, space.k)
    if len(part.gamma_edges[i]) == 0:
        log.warning("subdomain %d has no interface; coupling block is empty", i)
        return sp.csr_matrix((space.n_volume(i), 0))
    mask = part.subdomain_of == i
    Cg = _coupling_global(space, rule, mu, owner_filter=mask)
    return _restrict(Cg, space.volume_index(i), space.lambda_index(i))


def _trace_mass_global(space: DgSpace, weights=None):
    """Block-diagonal edge mass on ``Lambda_h``; ``weights`` scales each edge."""
    mesh = space.mesh
    edges = space.interface_edges
    if edges.size == 0:
        return sp.csr_matrix((0, 0))
    ell = mesh.edge_lengths()[edges]
    if weights is not None:
        ell = ell * weights[edges]
    m = space.trace.mass()
    return sp.block_diag([l * m for l in ell], format="csr")


def assemble_interface(mesh: Mesh, part: Partition, space: DgSpace, rule: PenaltyRule):
    """Interface blocks.

    Returns ``(A_G_local, A_G, M_G_local, M_G)``: per-subdomain
    ``A_Gi = 2 mu M_Gi`` on ``Lambda_i``, the single-valued
    ``A_G = sum_i mu M_Gi`` on ``Lambda_h`` (``2 mu M`` on each edge), and the
    matching unweighted mass matrices.
    """
    mu = _edge_mu(mesh, rule, space.k)
    MG = _trace_mass_global(space)
    MGmu = _trace_mass_global(space, mu)
    AG_loc, MG_loc = [], []
    for i in range(part.n_subdomains):
        idx = space.lambda_index(i)
        MG_loc.append(_restrict(MG, idx))
        AG_loc.append((2.0 * _restrict(MGmu, idx)).tocsr())
    AG = (2.0 * MGmu).tocsr()
    return AG_loc, AG, MG_loc, MG


def _load_global(space: DgSpace, f, degree=None):
    mesh = space.mesh
    nd = space.local_dim
    if f is None:
        return np.zeros(mesh.n_elements * nd)
    geom = _geometry(mesh)
    pts, w = triangle_rule(degree or 2 * space.k + 4)
    x = geom.v0[:, None, :] + np.einsum("eij,qj->eqi", geom.B, pts)
    fx = np.asarray(f(x[..., 0], x[..., 1]), dtype=float)
    fx = np.broadcast_to(fx, x.shape[:2])
    phi = space.ref.values(pts)
    loc = np.abs(geom.det)[:, None] * np.einsum("q,eq,qa->ea", w, fx, phi)
    return loc.ravel()


def assemble_load(mesh: Mesh, part: Partition, space: DgSpace, f):
    """Per-subdomain load vectors ``int f v``; ``f(x, y)`` is vectorized."""
    fg = _load_global(space, f)
    return [fg[space.volume_index(i)] for i in range(part.n_subdomains)]


# ---------------------------------------------------------------- system


@dataclass
class IphSystem:
    """Assembled IPH blocks for one mesh, partition, degree and ``eta``."""

    space: DgSpace
    eta: float
    alpha: float
    mu: np.ndarray
    A: list
    M: list
    K: list
    AiG: list
    AGi: list
    MGi: list
    AG: sp.csr_matrix
    MG: sp.csr_matrix
    f: list
    _factors: dict = field(default_factory=dict, repr=False)

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    @property
    def part(self) -> Partition:
        return self.space.part

    @property
    def k(self) -> int:
        return self.space.k

    @property
    def n_subdomains(self) -> int:
        return self.part.n_subdomains

    def factor(self, i: int):
        if i not in self._factors:
            self._factors[i] = factorize(self.A[i])
        return self._factors[i]

    def with_load(self, f=None, vectors=None) -> "IphSystem":
        """Copy sharing the matrices (and factorizations) with a new load."""
        if vectors is None:
            vectors = assemble_load(self.mesh, self.part, self.space, f)
        new = IphSystem(self.space, self.eta, self.alpha, self.mu, self.A, self.M, self.K,
                        self.AiG, self.AGi, self.MGi, self.AG, self.MG, list(vectors))
        new._factors = self._factors
        return new

    def offsets(self) -> np.ndarray:
        return np.cumsum([0] + [a.shape[0] for a in self.A])

    def global_matrix(self) -> sp.csr_matrix:
        """The full saddle matrix with volume blocks first, then ``Lambda_h``."""
        AI = sp.block_diag(self.A, format="csr")
        cols = [self.AiG[i] @ _prolongation(self.space, i) for i in range(self.n_subdomains)]
        AIG = sp.vstack(cols, format="csr") if cols else sp.csr_matrix((AI.shape[0], 0))
        return sp.bmat([[AI, AIG], [AIG.T, self.AG]], format="csr")

    def global_rhs(self) -> np.ndarray:
        return np.concatenate(list(self.f) + [np.zeros(self.space.n_trace_global)])


def _prolongation(space: DgSpace, i: int) -> sp.csr_matrix:
    """0/1 matrix taking ``Lambda_h`` coefficients to ``Lambda_i``."""
    idx = space.lambda_index(i)
    m = len(idx)
    return sp.csr_matrix((np.ones(m), (np.arange(m), idx)), shape=(m, space.n_trace_global))


def assemble_system(mesh: Mesh, part: Partition, k: int = 1, eta: float = 0.0,
                    alpha: float | None = None, f=None, alpha_c: float = 2.0) -> IphSystem:
    """Assemble every block of the IPH system in one pass."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    alpha = default_alpha(k, alpha_c) if alpha is None else float(alpha)
    rule = PenaltyRule(alpha)
    space = DgSpace(mesh, part, k)
    mu = _edge_mu(mesh, rule, k)
    Mg, Kg = _local_global_matrices(space, rule, np.arange(mesh.n_elements), mu)
    Cg = _coupling_global(space, rule, mu)
    AGi, AG, MGi, MG = assemble_interface(mesh, part, space, rule)
    fg = _load_global(space, f)
    A, M, K, AiG, F = [], [], [], [], []
    for i in range(part.n_subdomains):
        idx = space.volume_index(i)
        Mi, Ki = _restrict(Mg, idx), _restrict(Kg, idx)
        M.append(Mi)
        K.append(Ki)
        A.append((eta * Mi + Ki).tocsr())
        AiG.append(_restrict(Cg, idx, space.lambda_index(i)))
        F.append(fg[idx])
    return IphSystem(space, float(eta), alpha, mu, A, M, K, AiG, AGi, MGi, AG, MG, F)


def assemble_seminorm_parts(system: IphSystem, i: int) -> dict:
    """Matrices of the pieces of the subdomain energy semi-norm.

    Keys: ``M`` (mass), ``G`` (broken gradient), ``jump_mu`` (``mu [u][v]``
    on subdomain-interior edges plus ``mu u v`` on domain-boundary edges),
    ``jump_interior`` (``[u][v]`` on subdomain-interior edges, no weight),
    ``trace_vv`` / ``trace_vv_mu`` (``int_Gi u v``), ``trace_vphi`` /
    ``trace_vphi_mu`` (``int_Gi v psi``), ``MG`` / ``MG_mu`` (trace mass).
    """
    space = system.space
    mesh, part = space.mesh, space.part
    geom = _geometry(mesh)
    nd, nt = space.local_dim, space.trace_dim
    mu = system.mu
    elems = space.elements[i]
    in_set = part.subdomain_of == i
    N = mesh.n_elements * nd
    idx = space.volume_index(i)
    same, cut, bnd = _edge_classes(mesh, part)

    _, Kvol = _volume_blocks(space, geom, elems)
    g = _Builder(N, N)
    g.add(_element_dofs(elems, nd), _element_dofs(elems, nd), Kvol)

    jm, j0 = _Builder(N, N), _Builder(N, N)
    faces = same[in_set[mesh.edge_elements[same, 0]]]
    if faces.size:
        for bld, wmu in ((jm, True), (j0, False)):
            L, R, blocks = _face_blocks(space, geom, faces, mu, with_flux=False, weight_mu=wmu)
            el = (L, R)
            for (p, q), blk in blocks.items():
                bld.add(_element_dofs(el[p], nd), _element_dofs(el[q], nd), blk)
    bedges = bnd[in_set[mesh.edge_elements[bnd, 0]]]
    if bedges.size:
        owners = mesh.edge_elements[bedges, 0]
        v, dn, w, me, _ = _one_sided(space, geom, bedges, owners, mu)
        blk = np.einsum("eq,eqa,eqb->eab", w * me, v, v)
        jm.add(_element_dofs(owners, nd), _element_dofs(owners, nd), blk)

    m_i = space.n_trace(i)
    tvv, tvv_mu = _Builder(N, N), _Builder(N, N)
    tvp, tvp_mu = _Builder(N, m_i), _Builder(N, m_i)
    for side in (0, 1):
        owners = mesh.edge_elements[cut, side]
        keep = in_set[owners]
        edges, owners = cut[keep], owners[keep]
        if edges.size == 0:
            continue
        v, dn, w, me, psi = _one_sided(space, geom, edges, owners, mu)
        ids = _element_dofs(owners, nd)
        cols = space.local_trace_index(i, edges).reshape(-1, nt)
        vv = np.einsum("eq,eqa,eqb->eab", w, v, v)
        vp = np.einsum("eq,eqa,qc->eac", w, v, psi)
        tvv.add(ids, ids, vv)
        tvv_mu.add(ids, ids, me[:, :1, None] * vv)
        tvp.add(ids, cols, vp)
        tvp_mu.add(ids, cols, me[:, :1, None] * vp)

    lam = space.lambda_index(i)
    MGmu = _trace_mass_global(space, mu)
    Mi = system.M[i]
    return {
        "M": Mi,
        "G": _restrict(g.tocsr(), idx),
        "jump_mu": _restrict(jm.tocsr(), idx),
        "jump_interior": _restrict(j0.tocsr(), idx),
        "trace_vv": _restrict(tvv.tocsr(), idx),
        "trace_vv_mu": _restrict(tvv_mu.tocsr(), idx),
        "trace_vphi": tvp.tocsr()[idx].tocsr(),
        "trace_vphi_mu": tvp_mu.tocsr()[idx].tocsr(),
        "MG": system.MGi[i],
        "MG_mu": _restrict(MGmu, lam) if lam.size else sp.csr_matrix((0, 0)),
    }


# ---------------------------------------------------------------- solving


@dataclass
class MonolithicSolution:
    u: list
    lam: np.ndarray
    cg: CGResult | None
    residual: float


def schur_apply(system: IphSystem, lam: np.ndarray) -> np.ndarray:
    """``S_G lam = A_G lam - sum_i P_i^T A_iG^T A_i^{-1} A_iG P_i lam``."""
    out = system.AG @ lam
    for i in range(system.n_subdomains):
        idx = system.space.lambda_index(i)
        if idx.size == 0:
            continue
        w = system.factor(i).solve(system.AiG[i] @ lam[idx])
        np.subtract.at(out, idx, system.AiG[i].T @ w)
    return out


def schur_rhs(system: IphSystem) -> np.ndarray:
    g = np.zeros(system.space.n_trace_global)
    for i in range(system.n_subdomains):
        idx = system.space.lambda_index(i)
        if idx.size == 0:
            continue
        w = system.factor(i).solve(system.f[i])
        np.subtract.at(g, idx, system.AiG[i].T @ w)
    return g


def back_substitute(system: IphSystem, lam: np.ndarray) -> list:
    u = []
    for i in range(system.n_subdomains):
        idx = system.space.lambda_index(i)
        rhs = system.f[i] - system.AiG[i] @ lam[idx] if idx.size else system.f[i]
        u.append(system.factor(i).solve(rhs))
    return u


def block_residual(system: IphSystem, u: list, lam: np.ndarray) -> float:
    """Relative residual of the full saddle system."""
    x = np.concatenate(list(u) + [lam])
    b = system.global_rhs()
    r = b - system.global_matrix() @ x
    scale = np.linalg.norm(b)
    return float(np.linalg.norm(r) / scale) if scale > 0 else float(np.linalg.norm(r))


def solve_monolithic(system: IphSystem, tol: float = 1e-12, maxit: int | None = None) -> MonolithicSolution:
    """Solve the Schur complement system by CG, then back-substitute."""
    n = system.space.n_trace_global
    result = None
    lam = np.zeros(n)
    if n:
        g = schur_rhs(system)
        result = cg(lambda x: schur_apply(system, x), g, tol=tol, maxit=maxit or 10 * n)
        if not result.converged:
            raise RuntimeError(
                f"CG on the Schur complement stagnated after {result.iterations} iterations "
                f"(residual {result.history[-1]:.3e})"
            )
        lam = result.x
    u = back_substitute(system, lam)
    res = block_residual(system, u, lam)
    if res > 1e-10:
        log.warning("monolithic block residual %.3e exceeds 1e-10", res)
    return MonolithicSolution(u, lam, result, res)


# ---------------------------------------------------------------- post-processing


def l2_project(space: DgSpace, g) -> list:
    """Element-wise L2 projection of ``g(x, y)`` onto the broken space."""
    mesh = space.mesh
    geom = _geometry(mesh)
    pts, w = triangle_rule(2 * space.k + 4)
    phi = space.ref.values(pts)
    mref = phi.T @ (w[:, None] * phi)
    rhs = _load_global(space, g).reshape(mesh.n_elements, -1)
    coef = np.linalg.solve(mref, (rhs / np.abs(geom.det)[:, None]).T).T.ravel()
    return [coef[space.volume_index(i)] for i in range(space.n_subdomains)]


def l2_error(space: DgSpace, u: list, exact) -> float:
    """``||u_h - exact||_{L2(Omega)}`` with a high-order element rule."""
    mesh = space.mesh
    geom = _geometry(mesh)
    nd = space.local_dim
    coef = np.zeros(mesh.n_elements * nd)
    for i in range(space.n_subdomains):
        coef[space.volume_index(i)] = u[i]
    coef = coef.reshape(mesh.n_elements, nd)
    pts, w = triangle_rule(2 * space.k + 6)
    x = geom.v0[:, None, :] + np.einsum("eij,qj->eqi", geom.B, pts)
    uh = coef @ space.ref.values(pts).T
    diff = uh - exact(x[..., 0], x[..., 1])
    return float(np.sqrt(np.sum(np.abs(geom.det)[:, None] * w[None, :] * diff ** 2)))


def l2_norm(space: DgSpace, system: IphSystem, u: list) -> float:
    return float(np.sqrt(sum(ui @ (system.M[i] @ ui) for i, ui in enumerate(u))))


def export_coo(matrix, path) -> None:
    """Write a sparse matrix as ``row col value`` lines."""
    m = sp.coo_matrix(matrix)
    np.savetxt(path, np.column_stack([m.row, m.col, m.data]), fmt=["%d", "%d", "%.17g"],
               header=f"{m.shape[0]} {m.shape[1]} {m.nnz}")
