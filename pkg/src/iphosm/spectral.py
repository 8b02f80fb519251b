"""Dense spectral checks of the interface operators and of the inequalities
behind the contraction estimate.

Symbolic constants are never invented: a constant is fitted on the coarsest
instance of a refinement sequence and the finer levels are checked against
it with a stated slack factor.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import IphSystem, assemble_seminorm_parts
from .linalg import dense_eig_sym, generalized_eig_sym, inverse_sqrt_sym
from .schwarz import observed_rate, theoretical_rho

DENSE_LIMIT = 4000


class SizeError(ValueError):
    """Raised when a dense eigenproblem would be too large."""


@dataclass
class ReportRow:
    quantity: str
    level: int
    measured: float
    bound: float
    ratio: float
    passed: bool


@dataclass
class SpectralReport:
    """Measured quantities against their bounds, one row per check."""

    name: str
    rows: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def add(self, quantity, level, measured, bound, passed, ratio=None):
        if ratio is None:
            ratio = measured / bound if bound not in (0, 0.0) and np.isfinite(bound) else float("nan")
        self.rows.append(ReportRow(quantity, level, float(measured), float(bound), float(ratio), bool(passed)))

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def failures(self) -> list:
        return [r for r in self.rows if not r.passed]

    def extend(self, other: "SpectralReport"):
        self.rows.extend(other.rows)
        self.info.update({f"{other.name}.{k}": v for k, v in other.info.items()})
        return self

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "level", "measured", "bound", "ratio", "pass"])
            for r in self.rows:
                w.writerow([r.quantity, r.level, f"{r.measured:.12g}", f"{r.bound:.12g}",
                            f"{r.ratio:.12g}", int(r.passed)])


def _guard(n, what):
    if n > DENSE_LIMIT:
        raise SizeError(f"{what} has dimension {n} > {DENSE_LIMIT}; use a coarser configuration")


# ---------------------------------------------------------------- dense blocks


def local_schur(system: IphSystem, i: int) -> np.ndarray:
    """Dense ``B_i = A_iG^T A_i^-1 A_iG``."""
    A_ig = system.AiG[i]
    _guard(A_ig.shape[1], f"Lambda_{i}")
    if A_ig.shape[1] == 0:
        return np.zeros((0, 0))
    B = np.asarray(A_ig.T @ system.factor(i).solve(A_ig.toarray()))
    return 0.5 * (B + B.T)


def harmonic_matrix(system: IphSystem, i: int) -> np.ndarray:
    """Dense ``W_i = -A_i^-1 A_iG`` (columns are harmonic extensions)."""
    A_ig = system.AiG[i]
    return -np.asarray(system.factor(i).solve(A_ig.toarray()))


def schur_dense(system: IphSystem) -> np.ndarray:
    """Dense ``S_G = A_G - sum_i P_i^T B_i P_i`` on ``Lambda_h``."""
    n = system.space.n_trace_global
    _guard(n, "Lambda_h")
    S = system.AG.toarray()
    for i in range(system.n_subdomains):
        idx = system.space.lambda_index(i)
        if idx.size:
            S[np.ix_(idx, idx)] -= local_schur(system, i)
    return 0.5 * (S + S.T)


def interface_mu(system: IphSystem) -> float:
    """Penalty on the interface (max over interface edges)."""
    edges = system.space.interface_edges
    return float(system.mu[edges].max()) if edges.size else float(system.mu.max())


# ---------------------------------------------------------------- operators


def schur_condition(system: IphSystem, level: int = 0) -> SpectralReport:
    """Extremal eigenvalues of ``(S_G, M_G)`` and the condition numbers."""
    S = schur_dense(system)
    M = system.MG.toarray()
    lam = generalized_eig_sym(S, M)
    sS = dense_eig_sym(S)
    sM = dense_eig_sym(M)
    rep = SpectralReport("schur_condition")
    k, h, H = system.k, system.mesh.h, system.part.H
    rep.info.update(lam_min=lam[0], lam_max=lam[-1], kappa_S=sS[-1] / sS[0], kappa_M=sM[-1] / sM[0],
                    bound_shape=system.alpha * system.part.H_domain ** 2 * k * k / (H * h) * sM[-1] / sM[0])
    rep.add("S_spd_min_eig", level, sS[0], 0.0, sS[0] > 0, ratio=float("nan"))
    # upper bound phi^T S phi <= A_G form: lam_max(M^-1 S) <= 2 mu
    mu = interface_mu(system)
    rep.add("lam_max(M^-1 S)", level, lam[-1], 2 * mu, lam[-1] <= 2 * mu * (1 + 1e-10))
    rep.add("lam_min(M^-1 S)", level, lam[0], 0.0, lam[0] > 0, ratio=float("nan"))
    return rep


def corner_elements(system: IphSystem, i: int) -> int:
    """Number of elements of subdomain ``i`` with two edges on ``Gamma_i``.

    Each such element adds one trace mode with ``B_i phi = 0``: the local
    space on that element can match the two interface traces exactly.
    """
    mesh, part = system.mesh, system.part
    on_gamma = np.zeros(mesh.n_edges, dtype=bool)
    on_gamma[part.gamma_edges[i]] = True
    counts = on_gamma[mesh.element_edges[part.elements_of(i)]].sum(axis=1)
    return int(np.count_nonzero(counts >= 2))


def b_spectrum(system: IphSystem, i: int, level: int = 0) -> SpectralReport:
    """Spectrum of ``A_Gi^-1 B_i`` and of the normalized ``(mu M_Gi)^-1 B_i``.

    The normalized spectrum lies in ``[0, 1]`` (equivalently
    ``sigma(A_Gi^-1 B_i)`` in ``[0, 1/2]``); the value 1 is attained by the
    constant trace on a floating subdomain with ``eta = 0``. Zero
    eigenvalues occur once per element with two interface edges; the
    report checks that count and strict positivity of the rest.
    """
    B = local_schur(system, i)
    AG = system.AGi[i].toarray()
    sig = generalized_eig_sym(B, AG)
    nu = 2.0 * sig
    n0 = corner_elements(system, i)
    zero_tol = 1e-9 * max(nu[-1], 1.0) if nu.size else 0.0
    rep = SpectralReport("b_spectrum")
    rep.info.update(sigma=sig, nu=nu, floating=bool(system.part.floating[i]), corner_elements=n0)
    n_zero = int(np.count_nonzero(nu <= zero_tol))
    rep.add("nu_kernel_dim", level, n_zero, n0, n_zero == n0, ratio=float("nan"))
    if n0 < len(nu):
        rep.add("nu_min", level, nu[n0], 0.0, nu[n0] > zero_tol, ratio=float("nan"))
    rep.add("nu_max", level, nu[-1], 1.0, nu[-1] <= 1.0 + 1e-10)
    return rep


def mk_spectrum(system: IphSystem, i: int, level: int = 0) -> SpectralReport:
    """Extremal eigenvalues of ``(K_i, M_i)``."""
    K = system.K[i].toarray()
    M = system.M[i].toarray()
    _guard(K.shape[0], f"V_h,{i}")
    lam = generalized_eig_sym(0.5 * (K + K.T), 0.5 * (M + M.T))
    rep = SpectralReport("mk_spectrum")
    rep.info.update(lam_min=lam[0], lam_max=lam[-1])
    rep.add("lam_min(M^-1 K)", level, lam[0], 0.0, lam[0] > 0, ratio=float("nan"))
    rep.add("lam_max(M^-1 K)", level, lam[-1], float("inf"), True, ratio=float("nan"))
    return rep


def local_block_kernel(system: IphSystem, i: int) -> np.ndarray:
    """Eigenvalues of the subdomain block ``[[A_i, A_iG], [A_iG^T, A_Gi/2]]``
    (the local form with the trace as unknown). It is singular exactly for a
    floating subdomain with ``eta = 0`` (constants)."""
    A = system.A[i].toarray()
    C = system.AiG[i].toarray()
    G = 0.5 * system.AGi[i].toarray()
    _guard(A.shape[0] + G.shape[0], "local block")
    Ahat = np.block([[A, C], [C.T, G]])
    return dense_eig_sym(0.5 * (Ahat + Ahat.T))


# ---------------------------------------------------------------- contraction


def expected_exponent(eta_power: int) -> tuple[float, float]:
    """Exponents of ``h`` in ``1 - rho`` (observed class, refined theory).

    ``eta = O(1)``: both 1; ``eta = O(1/h)``: observed 1/2 against 1 in
    theory (not sharp); ``eta = O(1/h^2)``: both 0.
    """
    return {0: (1.0, 1.0), 1: (0.5, 1.0), 2: (0.0, 0.0)}[eta_power]


def refined_rho(h, H, alpha, eta, C1=1.0, C2=1.0, c=1.0) -> float:
    """``1 - C1 eta/(eta + C2 h^-2) - c h/(H alpha)``."""
    return 1.0 - C1 * eta / (eta + C2 / h ** 2) - c * h / (H * alpha)


def contraction_comparison(history, h, H, k, eta, gamma, floating_present=False,
                           alpha=None, level: int = 0) -> SpectralReport:
    """Observed factor (fitted on the last half of ``history``) against the
    theoretical bound. The bound controls the squared R-norm, so it is
    compared with ``rho_obs**2``."""
    if len(history) < 10:
        raise ValueError("history too short to fit a rate (need >= 10 points)")
    rho_obs = observed_rate(history)
    rep = SpectralReport("contraction_comparison")
    rep.add("rho_obs", level, rho_obs, 1.0, rho_obs <= 1.0)
    if floating_present and eta <= 0:
        rep.info["rho_theory"] = float("nan")
        return rep
    rho_th = theoretical_rho(h, H, k, eta, gamma, floating_present, alpha)
    rep.info.update(rho_obs=rho_obs, rho_theory=rho_th)
    rep.add("rho_obs^2 vs rho_theory", level, rho_obs ** 2, rho_th, rho_obs ** 2 <= rho_th)
    return rep


def classify_contraction(hs, rhos, eta_power: int, tol: float = 0.25) -> dict:
    """Fit ``1 - rho ~ h^p`` over a refinement sequence and compare ``p``
    with the observed class and with the refined theory."""
    p = float(np.polyfit(np.log(hs), np.log(1.0 - np.asarray(rhos)), 1)[0])
    obs, theory = expected_exponent(eta_power)
    return {"exponent": p, "expected": obs, "theory": theory,
            "matches_expected": abs(p - obs) <= tol, "sharp": abs(obs - theory) <= tol}


# ---------------------------------------------------------------- appendix


def _seminorm_phi(system, i, parts=None, eta=None):
    """Semi-norm of ``(H_i(phi), phi)`` as a dense form in ``phi``, plus the
    pieces used by the individual inequalities."""
    parts = parts or assemble_seminorm_parts(system, i)
    eta = system.eta if eta is None else eta
    W = harmonic_matrix(system, i)
    D = lambda m: m.toarray()
    Nvv = eta * D(parts["M"]) + D(parts["G"]) + D(parts["jump_mu"]) + D(parts["trace_vv_mu"])
    Nvp = -D(parts["trace_vphi_mu"])
    Npp = D(parts["MG_mu"])
    Z = np.vstack([W, np.eye(W.shape[1])])
    N = np.block([[Nvv, Nvp], [Nvp.T, Npp]])
    Nphi = Z.T @ N @ Z
    return 0.5 * (Nphi + Nphi.T), W, parts


def _min_ratio(num, den, rng, samples):
    """Sampled minimum of ``x^T num x / x^T den x``."""
    X = rng.standard_normal((num.shape[0], samples))
    a = np.einsum("ij,ij->j", X, num @ X)
    b = np.einsum("ij,ij->j", X, den @ X)
    return float(np.min(a / b))


def _max_ratio(num, den, rng, samples):
    return -_min_ratio(-num, den, rng, samples)


def verify_appendix_estimates(system: IphSystem, i: int, samples: int = 200, seed: int = 0,
                              gamma: float | None = None, level: int = 0) -> SpectralReport:
    """Measure the constants of the subdomain inequalities.

    For each inequality both the sampled extreme over ``samples`` seeded
    random traces and the exact extreme (dense generalized eigenproblem)
    are reported. Constants, as measured:

    - ``A2``: ``min (mu||phi||^2 - a_i(v,v)) / ||(v,phi)||_i^2``
    - ``A3``: ``1 - max a_i(v,v) / (mu||phi||^2)`` and that value divided by
      ``h/(H k^2)``
    - ``traceineq``: ``H_i min (|grad u|^2 + mu|[u]|^2 + mu|u-phi|^2)/|phi|^2``
      over all ``u`` (not only harmonic ones)
    - ``karakashian``: ``max |u|_G^2 / (|u|^2/H_i + H_i(|grad u|^2 + |[u]|^2/h))``
    - ``RoptEst``: ``max ||R_i phi||^2 / ((2g-1)^2 C(H,eta) + 1/mu) ||(u,phi)||^2``

    ``v = u = H_i(phi)`` throughout, except in the two trace inequalities.
    """
    rng = np.random.default_rng(seed)
    part = system.part
    floating = bool(part.floating[i])
    Hi = float(part.H_i[i])
    h = system.mesh.h
    k = system.k
    mu = interface_mu(system)
    eta = system.eta
    rep = SpectralReport("appendix")
    if system.space.n_trace(i) == 0:
        return rep
    Nphi, W, parts = _seminorm_phi(system, i)
    B = local_schur(system, i)
    P = parts["MG_mu"].toarray()
    MG = parts["MG"].toarray()
    kernel = floating and eta == 0

    # A2
    lhs = P - B
    if not kernel:
        c_exact = generalized_eig_sym(lhs, Nphi)[0]
        c_samp = _min_ratio(lhs, Nphi, rng, samples)
        rep.add("A2.c_exact", level, c_exact, 0.0, c_exact > 0, ratio=float("nan"))
        rep.add("A2.c_sampled", level, c_samp, c_exact, c_samp >= c_exact * (1 - 1e-9))

    # A3
    ratio_max = generalized_eig_sym(B, P)[-1]
    gap = 1.0 - ratio_max
    scale = h / (Hi * k * k)
    samp = _max_ratio(B, P, rng, samples)
    rep.add("A3.gap", level, gap, 0.0, gap >= -1e-10, ratio=float("nan"))
    rep.add("A3.sampled_max", level, samp, ratio_max, samp <= ratio_max * (1 + 1e-9))
    if not floating:
        rep.add("A3.gap_over_scale", level, gap / scale, 0.0, gap > 0, ratio=float("nan"))
    rep.info.update(A3_gap=gap, A3_scale=scale)

    # traceineq: minimize over u for fixed phi via the Schur complement
    if not floating:
        D = lambda m: m.toarray()
        Tuu = D(parts["G"]) + D(parts["jump_mu"]) + D(parts["trace_vv_mu"])
        Tup = -D(parts["trace_vphi_mu"])
        S = P - Tup.T @ np.linalg.solve(Tuu, Tup)
        S = 0.5 * (S + S.T)
        c_tr = Hi * generalized_eig_sym(S, MG)[0]
        # sampled with u = the minimizer for phi; never below the exact min
        X = rng.standard_normal((S.shape[0], samples))
        vals = Hi * np.einsum("ij,ij->j", X, S @ X) / np.einsum("ij,ij->j", X, MG @ X)
        rep.add("traceineq.c_exact", level, c_tr, 0.0, c_tr > 0, ratio=float("nan"))
        rep.add("traceineq.c_sampled", level, float(vals.min()), c_tr, vals.min() >= c_tr * (1 - 1e-9))

    # karakashian
    D = lambda m: m.toarray()
    num = D(parts["trace_vv"])
    den = D(parts["M"]) / Hi + Hi * (D(parts["G"]) + D(parts["jump_interior"]) / h)
    num, den = 0.5 * (num + num.T), 0.5 * (den + den.T)
    c_fk = generalized_eig_sym(num, den)[-1]
    Us = W @ rng.standard_normal((W.shape[1], samples))
    s_fk = float(np.max(np.einsum("ij,ij->j", Us, num @ Us) / np.einsum("ij,ij->j", Us, den @ Us)))
    rep.add("karakashian.c_exact", level, c_fk, float("inf"), np.isfinite(c_fk), ratio=float("nan"))
    rep.add("karakashian.c_sampled", level, s_fk, c_fk, s_fk <= c_fk * (1 + 1e-9))

    # RoptEst
    if eta > 0:
        g = 0.5 * (1.0 + math.sqrt(h)) if gamma is None else gamma
        R = g * np.eye(len(B)) - np.linalg.solve(system.AGi[i].toarray(), B)
        RR = R.T @ MG @ R
        RR = 0.5 * (RR + RR.T)
        C = 1.0 / (Hi * eta) if floating else Hi
        weight = (2 * g - 1) ** 2 * C + 1.0 / mu
        c_r = generalized_eig_sym(RR, Nphi)[-1] / weight
        s_r = _max_ratio(RR, Nphi, rng, samples) / weight
        rep.add("RoptEst.c_exact", level, c_r, float("inf"), np.isfinite(c_r), ratio=float("nan"))
        rep.add("RoptEst.c_sampled", level, s_r, c_r, s_r <= c_r * (1 + 1e-9))
    return rep


APPENDIX_CONSTANTS = {
    # name -> (row quantity, direction): 'lower' constants must not collapse,
    # 'upper' constants must not blow up across refinements
    "A2": ("A2.c_exact", "lower"),
    "A3": ("A3.gap_over_scale", "lower"),
    "traceineq": ("traceineq.c_exact", "lower"),
    "karakashian": ("karakashian.c_exact", "upper"),
    "RoptEst": ("RoptEst.c_exact", "upper"),
}


def fit_constants(reports: list, slack: float = 2.0) -> SpectralReport:
    """Fit each constant on level 0 and check levels >= 1 stay within
    ``slack`` of it (in the direction that keeps the bound valid)."""
    out = SpectralReport("fitted_constants")
    for name, (quantity, direction) in APPENDIX_CONSTANTS.items():
        vals = []
        for rep in reports:
            hit = [r.measured for r in rep.rows if r.quantity == quantity]
            vals.append(hit[0] if hit else None)
        if vals[0] is None:
            continue
        c0 = vals[0]
        for lvl, v in enumerate(vals):
            if v is None:
                continue
            ratio = v / c0
            if direction == "lower":
                ok = ratio >= 1.0 / slack
            else:
                ok = ratio <= slack
            out.add(name, lvl, v, c0, ok, ratio=ratio)
    return out


def sequence_check(name: str, values, expected_ratio: float, rtol: float = 0.25) -> SpectralReport:
    """Per-halving ratios of ``values`` within ``rtol`` of ``expected_ratio``."""
    rep = SpectralReport(name)
    values = list(values)
    for lvl in range(1, len(values)):
        r = values[lvl] / values[lvl - 1]
        rep.add(f"{name}.ratio", lvl, r, expected_ratio, abs(r / expected_ratio - 1.0) <= rtol, ratio=r / expected_ratio)
    return rep


def stable_check(name: str, values, rtol: float = 0.10) -> SpectralReport:
    """Values within ``rtol`` of the level-0 value."""
    rep = SpectralReport(name)
    v0 = values[0]
    for lvl, v in enumerate(values):
        rep.add(f"{name}.stable", lvl, v, v0, abs(v / v0 - 1.0) <= rtol)
    return rep


# ---------------------------------------------------------------- two subdomains


def ei_contraction_two(system: IphSystem, eta_label: str = "", level: int = 0, seed: int = 0) -> SpectralReport:
    """Error recursion of the two-subdomain iteration with ``gamma = 1``.

    With ``E_i = A_G^(1/2) (I - A_G^-1 B_i)`` one step maps
    ``E_2 lam_2 -> E_1 lam_1' = T_2 E_2 lam_2`` where
    ``T_2 = A_G^(-1/2) B_2 (A_G - B_2)^-1 A_G^(1/2)``. Its norm equals
    ``x/(1 - x)`` with ``x = lambda_max(A_G^-1 B_2)``; both routes are
    evaluated, and the recursion is checked on a random error.
    """
    if system.n_subdomains != 2:
        raise ValueError("ei_contraction_two needs exactly two subdomains")
    from .schwarz import OptimizedSchwarz, SchwarzConfig

    sp_ = system.space
    i0, i1 = sp_.lambda_index(0), sp_.lambda_index(1)
    if not np.array_equal(np.sort(i0), np.sort(i1)):
        raise ValueError("two subdomains must share the whole interface")
    # express both on Lambda_h ordering
    def on_h(i, X):
        idx = sp_.lambda_index(i)
        n = sp_.n_trace_global
        out = np.zeros((n, n))
        out[np.ix_(idx, idx)] = X
        return out

    B = [on_h(i, local_schur(system, i)) for i in (0, 1)]
    AG = system.AG.toarray()
    Aih = inverse_sqrt_sym(AG)
    Ahalf = np.linalg.inv(Aih)
    E = [Ahalf @ (np.eye(len(AG)) - np.linalg.solve(AG, Bi)) for Bi in B]
    T = [Aih @ Bi @ np.linalg.solve(AG - Bi, Ahalf) for Bi in B]
    norm_T = [float(np.linalg.norm(t, 2)) for t in T]
    x = [float(generalized_eig_sym(Bi, AG)[-1]) for Bi in B]
    spectral = [xi / (1 - xi) for xi in x]

    rep = SpectralReport("ei_contraction_two")
    for j in (0, 1):
        rep.add(f"T{j}.norm_vs_spectral", level, norm_T[j], spectral[j],
                abs(norm_T[j] - spectral[j]) <= 1e-8 * max(1.0, spectral[j]))
    factor = max(norm_T)
    rep.add("one_step_factor", level, factor, 1.0, factor < 1.0)

    # one actual step of the solver (f = 0, gamma = 1) from a random lam_2
    zero = system.with_load(vectors=[np.zeros_like(f) for f in system.f])
    solver = OptimizedSchwarz(zero, SchwarzConfig(gamma=1.0))
    rng = np.random.default_rng(seed)
    lam = [rng.uniform(-1, 1, len(i0)), rng.uniform(-1, 1, len(i1))]
    new = solver.step(solver.initial_state(lam0=lam, track_u=False), track_u=False)
    full = lambda i, v: np.bincount(sp_.lambda_index(i), weights=v, minlength=sp_.n_trace_global)
    before = np.linalg.norm(E[1] @ full(1, lam[1]))
    after = np.linalg.norm(E[0] @ full(0, new.lam[0]))
    rep.add("recursion_step", level, after, factor * before, after <= factor * before * (1 + 1e-10))
    pred = T[1] @ (E[1] @ full(1, lam[1]))
    err = np.linalg.norm(E[0] @ full(0, new.lam[0]) - pred) / max(np.linalg.norm(pred), 1e-300)
    rep.add("recursion_identity", level, err, 1e-10, err <= 1e-10)
    sE = [np.sort(np.linalg.svd(e, compute_uv=False)) for e in E]
    rep.info.update(x=x, factor=factor, E_sv=sE, eta_label=eta_label)
    return rep
