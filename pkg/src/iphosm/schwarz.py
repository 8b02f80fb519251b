"""Optimized Schwarz iteration on the augmented interface system.

Every subdomain ``i`` owns its own copy ``lam_i`` of the trace unknowns on
``Gamma_i``. Row ``i`` of the augmented system reads::

    A_i u_i + A_iG lam_i                                          = f_i
    A_iG^T u_i + g A_Gi lam_i + sum_j P_ij (A_jG^T u_j + (1-g) A_Gj lam_j) = 0

and the iteration is the block-Jacobi splitting of it: the neighbor terms are
taken from the previous iterate. Eliminating ``u_i`` leaves the small dense
Robin system ``(g A_Gi - B_i) lam_i = rhs`` with ``B_i = A_iG^T A_i^-1 A_iG``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import IphSystem, default_alpha, solve_monolithic

log = logging.getLogger(__name__)

GAMMA_RULES = ("fixed", "tau_const", "tau_H", "tau_H2", "asm")


class ConvergenceError(RuntimeError):
    """Raised by callers that insist on convergence; carries the result."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------- parameters


def gamma_opt(h: float, H: float, k: int, regime: str, gamma: float | None = None) -> float:
    """Optimized Robin weight for the given regime.

    ``tau_const``: ``(1 + sqrt(h H)/k)/2``; ``tau_H``: ``(1 + sqrt(h)/k)/2``;
    ``tau_H2``: ``(1 + sqrt(h/H)/k)/2``; ``asm``: 1; ``fixed`` returns
    ``gamma`` unchanged.
    """
    if not (0 < h <= H):
        raise ValueError(f"need 0 < h <= H, got h={h}, H={H}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if regime == "tau_const":
        g = 0.5 * (1.0 + math.sqrt(h * H) / k)
    elif regime == "tau_H":
        g = 0.5 * (1.0 + math.sqrt(h) / k)
    elif regime == "tau_H2":
        g = 0.5 * (1.0 + math.sqrt(h / H) / k)
    elif regime == "asm":
        g = 1.0
    elif regime == "fixed":
        if gamma is None:
            raise ValueError("gamma_rule 'fixed' needs an explicit gamma")
        g = float(gamma)
    else:
        raise ValueError(f"unknown gamma rule {regime!r}; expected one of {GAMMA_RULES}")
    if not (0.5 < g <= 1.0 + 1e-14):
        raise ValueError(f"gamma = {g:.6g} is outside (1/2, 1] for h={h}, H={H}, k={k}")
    return min(g, 1.0)


def theoretical_rho(h: float, H: float, k: int, eta: float, gamma: float,
                    floating_present: bool, alpha: float | None = None) -> float:
    """Contraction bound ``1 - (2g-1) / (mu (2g-1)^2 C + 1)`` in the R-norm.

    ``C = H`` for subdomains touching the Dirichlet boundary and
    ``1/(H eta)`` for floating ones; the worst of the present cases is used.
    """
    if not (0.5 < gamma <= 1.0):
        raise ValueError("gamma must lie in (1/2, 1]")
    if h <= 0 or H <= 0:
        raise ValueError("h and H must be positive")
    alpha = default_alpha(k) if alpha is None else alpha
    mu = alpha * k * k / h
    C = H
    if floating_present:
        if eta <= 0:
            raise ValueError("the bound needs eta > 0 when floating subdomains are present")
        C = max(C, 1.0 / (H * eta))
    d = 2.0 * gamma - 1.0
    return 1.0 - d / (mu * d * d * C + 1.0)


def observed_rate(history) -> float:
    """Least-squares contraction factor over the last half of ``history``."""
    h = np.asarray(history, dtype=float)
    tail = h[len(h) // 2:]
    tail = tail[tail > 0]
    if len(tail) < 2:
        return float("nan")
    n = np.arange(len(tail))
    slope = np.polyfit(n, np.log(tail), 1)[0]
    return float(np.exp(slope))


def is_monotone(history, rtol: float = 1e-12) -> tuple[bool, int]:
    """Whether ``history`` never increases, allowing rounding of size
    ``rtol * history[0]``. Returns the flag and the number of increases."""
    h = np.asarray(history, dtype=float)
    if len(h) < 2:
        return True, 0
    ups = int(np.count_nonzero(h[1:] > h[:-1] + rtol * h[0]))
    return ups == 0, ups


@dataclass(frozen=True)
class SchwarzConfig:
    gamma: float | None = None
    eta: float | None = None
    alpha: float | None = None
    tol: float = 1e-8
    maxit: int = 20000
    gamma_rule: str = "fixed"
    seed: int = 0
    atol: float = 0.0

    def __post_init__(self):
        if self.gamma_rule not in GAMMA_RULES:
            raise ValueError(f"unknown gamma rule {self.gamma_rule!r}")
        if self.gamma_rule == "asm":
            if self.gamma not in (None, 1.0):
                raise ValueError("gamma_rule 'asm' forces gamma = 1")
            object.__setattr__(self, "gamma", 1.0)
        if self.gamma_rule == "fixed" and self.gamma is None:
            raise ValueError("gamma_rule 'fixed' needs gamma")
        if self.gamma is not None and not (0.5 < self.gamma <= 1.0):
            raise ValueError(f"gamma must lie in (1/2, 1], got {self.gamma}")
        if self.eta is not None and self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not self.tol > 0 or self.maxit < 1:
            raise ValueError("need tol > 0 and maxit >= 1")

    def resolve(self, system: IphSystem) -> "SchwarzConfig":
        """Fill in gamma from the rule and check eta/alpha against the system."""
        if self.eta is not None and not math.isclose(self.eta, system.eta, rel_tol=1e-12):
            raise ValueError(f"config eta={self.eta} but system was assembled with eta={system.eta}")
        if self.alpha is not None and not math.isclose(self.alpha, system.alpha, rel_tol=1e-12):
            raise ValueError(f"config alpha={self.alpha} but system uses alpha={system.alpha}")
        g = self.gamma
        if self.gamma_rule not in ("fixed", "asm"):
            g = gamma_opt(system.mesh.h, system.part.H, system.k, self.gamma_rule)
        return replace(self, gamma=g, eta=system.eta, alpha=system.alpha,
                       gamma_rule="fixed" if self.gamma_rule != "asm" else "asm")


@dataclass
class InterfaceState:
    lam: list
    u: list | None = None
    iteration: int = 0
    history: list = field(default_factory=list)


@dataclass
class OsmResult:
    u: list
    lam_h: np.ndarray
    history: list
    iterations: int
    converged: bool
    disagreement: float
    state: InterfaceState
    gamma: float

    @property
    def rho_obs(self) -> float:
        return observed_rate(self.history)


# ---------------------------------------------------------------- solver


class OptimizedSchwarz:
    """Precomputed per-subdomain data for the block-Jacobi iteration."""

    def __init__(self, system: IphSystem, config: SchwarzConfig):
        self.system = system
        self.config = config.resolve(system)
        self.gamma = self.config.gamma
        space = system.space
        self.n = system.n_subdomains
        self.index = [space.lambda_index(i) for i in range(self.n)]
        self.n_global = space.n_trace_global
        self.B, self.AG, self.MG, self.R = [], [], [], []
        self._robin = []
        self.g = []
        self.uf = []
        for i in range(self.n):
            A_ig = system.AiG[i]
            fac = system.factor(i)
            if A_ig.shape[1]:
                B = np.asarray(A_ig.T @ fac.solve(A_ig.toarray()))
            else:
                B = np.zeros((0, 0))
            B = 0.5 * (B + B.T)
            AG = system.AGi[i].toarray()
            MG = system.MGi[i].toarray()
            self.B.append(B)
            self.AG.append(AG)
            self.MG.append(MG)
            self.R.append(self.gamma * np.eye(len(B)) - np.linalg.solve(AG, B) if len(B) else B)
            self._robin.append(sla.cho_factor(self.gamma * AG - B) if len(B) else None)
            uf = fac.solve(system.f[i])
            self.uf.append(uf)
            self.g.append(A_ig.T @ uf)
        self._owners = self._pair_dofs()
        self._build_concatenated()

    # -- bookkeeping

    def _pair_dofs(self):
        """For every global trace dof, the two (subdomain, local dof) owners."""
        sub = np.full((self.n_global, 2), -1, dtype=np.int64)
        loc = np.full((self.n_global, 2), -1, dtype=np.int64)
        fill = np.zeros(self.n_global, dtype=np.int64)
        for i, idx in enumerate(self.index):
            for a, gdof in enumerate(idx):
                sub[gdof, fill[gdof]] = i
                loc[gdof, fill[gdof]] = a
                fill[gdof] += 1
        if np.any(fill != 2):
            raise ValueError("every interface dof must be shared by exactly two subdomains")
        return sub, loc

    def _build_concatenated(self):
        """Block-diagonal operators on the concatenation of all ``Lambda_i``,
        used by the trace-only iteration."""
        sizes = [len(idx) for idx in self.index]
        self._off = np.cumsum([0] + sizes)
        sub, loc = self._owners
        first = self._off[sub[:, 0]] + loc[:, 0]
        second = self._off[sub[:, 1]] + loc[:, 1]
        partner = np.empty(self._off[-1], dtype=np.int64)
        partner[first] = second
        partner[second] = first
        self._partner = partner
        blocks = lambda mats: sp.block_diag(mats, format="csr") if mats else sp.csr_matrix((0, 0))
        keep = [i for i in range(self.n) if sizes[i]]
        self._Q = blocks([(1.0 - self.gamma) * self.AG[i] - self.B[i] for i in keep])
        self._Rd = blocks([self.R[i] for i in keep])
        self._MGd = blocks([self.MG[i] for i in keep])
        self._Rinv = blocks([sla.cho_solve(self._robin[i], np.eye(sizes[i])) for i in keep])
        self._Dd = blocks([self.gamma * self.AG[i] - self.B[i] for i in keep])
        self._gcat = np.concatenate([self.g[i] for i in range(self.n)]) if self.n else np.zeros(0)

    def _split(self, x) -> list:
        return [x[a:b].copy() for a, b in zip(self._off[:-1], self._off[1:])]

    def _cat(self, lam: list) -> np.ndarray:
        return np.concatenate([np.asarray(l, dtype=float) for l in lam]) if lam else np.zeros(0)

    def _fast_step(self, x: np.ndarray) -> np.ndarray:
        q = self._gcat + self._Q @ x
        return self._Rinv @ (-q[self._partner] - self._gcat)

    def _fast_R_norm(self, e: np.ndarray) -> float:
        r = self._Rd @ e
        return math.sqrt(max(float(r @ (self._MGd @ r)), 0.0))

    def _fast_residual(self, x: np.ndarray) -> float:
        q = self._gcat + self._Q @ x
        r = self._gcat + self._Dd @ x + q[self._partner]
        return float(np.linalg.norm(r))

    def restrict(self, lam_h) -> list:
        """Copy a single-valued trace vector into each ``Lambda_i``."""
        return [np.asarray(lam_h)[idx].copy() for idx in self.index]

    def average(self, lam: list) -> tuple[np.ndarray, float]:
        """Single-valued average of the one-sided traces and their largest gap."""
        out = np.zeros(self.n_global)
        for i, idx in enumerate(self.index):
            np.add.at(out, idx, lam[i])
        sub, loc = self._owners
        first = np.array([lam[s][a] for s, a in zip(sub[:, 0], loc[:, 0])]) if self.n_global else np.zeros(0)
        second = np.array([lam[s][a] for s, a in zip(sub[:, 1], loc[:, 1])]) if self.n_global else np.zeros(0)
        gap = float(np.max(np.abs(first - second), initial=0.0))
        return 0.5 * out, gap

    def _exchange(self, q: list) -> list:
        """Return, for each ``i``, the neighbor contributions on ``Lambda_i``."""
        tot = np.zeros(self.n_global)
        for i, idx in enumerate(self.index):
            np.add.at(tot, idx, q[i])
        return [tot[idx] - q[i] for i, idx in enumerate(self.index)]

    # -- operators

    def harmonic_extension(self, i: int, phi) -> np.ndarray:
        """``u_i = -A_i^-1 A_iG phi``."""
        phi = np.asarray(phi, dtype=float)
        return -self.system.factor(i).solve(self.system.AiG[i] @ phi)

    def robin_trace(self, i: int, u) -> np.ndarray:
        """Trace-basis coefficients ``z`` of ``(mu - d/dn) u`` on ``Gamma_i``:
        ``M_Gi z = -A_iG^T u``."""
        rhs = -(self.system.AiG[i].T @ np.asarray(u, dtype=float))
        if rhs.size == 0:
            return rhs
        return np.linalg.solve(self.MG[i], rhs)

    def apply_R(self, i: int, phi) -> np.ndarray:
        """``R_i(phi) = gamma phi - z / (2 mu)`` with ``z`` the Robin trace of
        the harmonic extension (matrix-free route)."""
        phi = np.asarray(phi, dtype=float)
        z = self.robin_trace(i, self.harmonic_extension(i, phi))
        mu2 = np.diag(self.AG[i]) / np.diag(self.MG[i]) if phi.size else np.zeros(0)
        return self.gamma * phi - z / mu2

    def R_norm(self, lam: list) -> float:
        """``(sum_i ||R_i lam_i||^2_{Gamma_i})^(1/2)``."""
        s = 0.0
        for i in range(self.n):
            r = self.R[i] @ lam[i]
            s += float(r @ (self.MG[i] @ r))
        return math.sqrt(max(s, 0.0))

    def residual_norm(self, state: InterfaceState) -> float:
        """Norm of the continuity rows of the augmented system at ``state``."""
        q = self._neighbor_data(state)
        nb = self._exchange(q)
        s = 0.0
        for i in range(self.n):
            own = self.g[i] - self.B[i] @ state.lam[i] + self.gamma * (self.AG[i] @ state.lam[i])
            r = own + nb[i]
            s += float(r @ r)
        return math.sqrt(s)

    def _neighbor_data(self, state: InterfaceState) -> list:
        """``A_jG^T u_j + (1 - gamma) A_Gj lam_j`` for every ``j``."""
        q = []
        for j in range(self.n):
            lam = state.lam[j]
            if state.u is not None:
                flux = self.system.AiG[j].T @ state.u[j]
            else:
                flux = self.g[j] - self.B[j] @ lam
            q.append(flux + (1.0 - self.gamma) * (self.AG[j] @ lam))
        return q

    def step(self, state: InterfaceState, track_u: bool = True) -> InterfaceState:
        """One block-Jacobi sweep; all subdomains use iterate ``n - 1`` data."""
        nb = self._exchange(self._neighbor_data(state))
        lam_new, u_new = [], [] if track_u else None
        for i in range(self.n):
            if self._robin[i] is None:
                lam_i = np.zeros(0)
            else:
                lam_i = sla.cho_solve(self._robin[i], -nb[i] - self.g[i])
            lam_new.append(lam_i)
            if track_u:
                rhs = self.system.f[i] - self.system.AiG[i] @ lam_i
                u_new.append(self.system.factor(i).solve(rhs))
        return InterfaceState(lam_new, u_new, state.iteration + 1, list(state.history))

    def local_u(self, lam: list) -> list:
        return [self.system.factor(i).solve(self.system.f[i] - self.system.AiG[i] @ lam[i])
                for i in range(self.n)]

    def initial_state(self, lam0=None, reference=None, track_u: bool = True) -> InterfaceState:
        """Seeded uniform[-1, 1] initial traces, shifted by ``reference``
        (one-sided list) when given; or an explicit ``lam0`` list."""
        if lam0 is None:
            rng = np.random.default_rng(self.config.seed)
            lam0 = [rng.uniform(-1.0, 1.0, len(idx)) for idx in self.index]
            if reference is not None:
                lam0 = [a + b for a, b in zip(lam0, reference)]
        lam0 = [np.asarray(l, dtype=float).copy() for l in lam0]
        u0 = self.local_u(lam0) if track_u else None
        return InterfaceState(lam0, u0, 0, [])

    def solve(self, lam0=None, reference=None, indicator: str | None = None,
              track_u: bool = False, atol: float | None = None,
              rtol: float | None = None) -> OsmResult:
        """Iterate until ``ind_n <= max(rtol * ind_0, atol)`` (``rtol``
        defaults to the configured ``tol``), and at least once.

        ``indicator='error'`` uses ``||R(lam^n - lam*)||`` with ``lam*`` given
        by ``reference`` (single-valued, on ``Lambda_h``); ``'residual'``
        uses the continuity residual of the augmented system.
        """
        cfg = self.config
        atol = cfg.atol if atol is None else atol
        if indicator is None:
            indicator = "error" if reference is not None else "residual"
        ref = self.restrict(reference) if reference is not None else None
        if indicator == "error" and ref is None:
            raise ValueError("the error indicator needs a reference solution")

        def measure(st):
            if indicator == "error":
                return self.R_norm([a - b for a, b in zip(st.lam, ref)])
            return self.residual_norm(st)

        state = self.initial_state(lam0=lam0, reference=ref if lam0 is None else None, track_u=track_u)
        if track_u:
            ind0 = measure(state)
        else:
            x = self._cat(state.lam)
            xref = self._cat(ref) if ref is not None else None
            fast = (lambda v: self._fast_R_norm(v - xref)) if indicator == "error" else self._fast_residual
            ind0 = fast(x)
        state.history.append(ind0)
        stop = max((cfg.tol if rtol is None else rtol) * ind0, atol)
        converged = False
        while state.iteration < cfg.maxit:
            if track_u:
                state = self.step(state, track_u=True)
                state.history.append(measure(state))
            else:
                x = self._fast_step(x)
                state.iteration += 1
                state.history.append(fast(x))
            if state.history[-1] <= stop:
                converged = True
                break
        if not track_u:
            state.lam = self._split(x)
        if not converged:
            log.warning("OSM did not converge in %d iterations (indicator %.3e -> %.3e)",
                        cfg.maxit, ind0, state.history[-1])
        u = state.u if state.u is not None else self.local_u(state.lam)
        lam_h, gap = self.average(state.lam)
        return OsmResult(u, lam_h, state.history, state.iteration, converged, gap, state, self.gamma)


# ---------------------------------------------------------------- functional API


def harmonic_extension(system: IphSystem, i: int, phi) -> np.ndarray:
    return -system.factor(i).solve(system.AiG[i] @ np.asarray(phi, dtype=float))


def robin_trace(system: IphSystem, i: int, u) -> np.ndarray:
    rhs = -(system.AiG[i].T @ np.asarray(u, dtype=float))
    return np.linalg.solve(system.MGi[i].toarray(), rhs) if rhs.size else rhs


def assemble_R(system: IphSystem, i: int, gamma: float) -> np.ndarray:
    """Dense matrix of ``phi -> R_i(phi)`` on ``Lambda_i``."""
    A_ig = system.AiG[i]
    B = np.asarray(A_ig.T @ system.factor(i).solve(A_ig.toarray()))
    return gamma * np.eye(len(B)) - np.linalg.solve(system.AGi[i].toarray(), B)


def osm_step(solver: OptimizedSchwarz, state: InterfaceState) -> InterfaceState:
    return solver.step(state, track_u=True)


def osm_solve(system: IphSystem, config: SchwarzConfig, f=None, *, reference=None,
              lam0=None, indicator=None, track_u=False, atol=None) -> OsmResult:
    """Run the iteration on ``system`` (reloaded with ``f`` if given)."""
    if f is not None:
        system = system.with_load(f)
    return OptimizedSchwarz(system, config).solve(lam0=lam0, reference=reference,
                                                   indicator=indicator, track_u=track_u, atol=atol)


def osm_study(system: IphSystem, config: SchwarzConfig, tol: float | None = None):
    """Error-decay study: monolithic reference, random start around it,
    ``||R(lam^n - lam*)||`` as indicator. Returns ``(result, monolithic)``."""
    mono = solve_monolithic(system)
    cfg = config if tol is None else replace(config, tol=tol)
    res = OptimizedSchwarz(system, cfg).solve(reference=mono.lam, indicator="error")
    return res, mono


def fixed_point_error(result: OsmResult, mono) -> float:
    """Relative difference between OSM and monolithic ``(u, lam)``."""
    a = np.concatenate(list(result.u) + [result.lam_h])
    b = np.concatenate(list(mono.u) + [mono.lam])
    scale = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (scale if scale > 0 else 1.0))


# ---------------------------------------------------------------- dense oracle


def augmented_matrix(system: IphSystem, gamma: float):
    """Dense augmented matrix ordered ``[u_0, lam_0, u_1, lam_1, ...]``, its
    right-hand side and the block offsets."""
    n = system.n_subdomains
    space = system.space
    idx = [space.lambda_index(i) for i in range(n)]
    sizes = [(system.A[i].shape[0], len(idx[i])) for i in range(n)]
    offs = np.cumsum([0] + [a + b for a, b in sizes])
    N = offs[-1]
    K = np.zeros((N, N))
    rhs = np.zeros(N)
    for i in range(n):
        ni, mi = sizes[i]
        o = offs[i]
        K[o:o + ni, o:o + ni] = system.A[i].toarray()
        K[o:o + ni, o + ni:o + ni + mi] = system.AiG[i].toarray()
        K[o + ni:o + ni + mi, o:o + ni] = system.AiG[i].T.toarray()
        K[o + ni:o + ni + mi, o + ni:o + ni + mi] = gamma * system.AGi[i].toarray()
        rhs[o:o + ni] = system.f[i]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            # P_ij: Lambda_j dofs that coincide with Lambda_i dofs
            pos_j = {g: b for b, g in enumerate(idx[j])}
            pairs = [(a, pos_j[g]) for a, g in enumerate(idx[i]) if g in pos_j]
            if not pairs:
                continue
            P = np.zeros((len(idx[i]), len(idx[j])))
            for a, b in pairs:
                P[a, b] = 1.0
            nj, mj = sizes[j]
            oi = offs[i] + sizes[i][0]
            oj = offs[j]
            K[oi:oi + sizes[i][1], oj:oj + nj] = P @ system.AiG[j].T.toarray()
            K[oi:oi + sizes[i][1], oj + nj:oj + nj + mj] = (1.0 - gamma) * P @ system.AGi[j].toarray()
    return K, rhs, offs, sizes


def dense_jacobi_step(K, rhs, offs, x):
    """One block-Jacobi sweep ``x <- D^-1 (b - (K - D) x)``."""
    D = np.zeros_like(K)
    for a, b in zip(offs[:-1], offs[1:]):
        D[a:b, a:b] = K[a:b, a:b]
    return np.linalg.solve(D, rhs - (K - D) @ x)


# ---------------------------------------------------------------- output


def write_history(path, history) -> None:
    """CSV with columns ``iteration, R_norm, rho_local``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "R_norm", "rho_local"])
        for n, v in enumerate(history):
            rho = "" if n == 0 or history[n - 1] == 0 else f"{v / history[n - 1]:.12g}"
            w.writerow([n, f"{v:.12g}", rho])
