import numpy as np
import pytest

from conftest import build
from iphosm import spectral
from iphosm.assembly import assemble_system
from iphosm.linalg import dense_eig_sym, generalized_eig_sym, inverse_sqrt_sym
from iphosm.mesh import generate_structured_mesh, partition_from_tags
from iphosm.schwarz import SchwarzConfig, osm_study
from iphosm.spectral import (SizeError, SpectralReport, b_spectrum, classify_contraction, contraction_comparison,
                             ei_contraction_two, fit_constants, local_schur, mk_spectrum, schur_condition,
                             schur_dense, sequence_check, stable_check, verify_appendix_estimates)


def corner_elements(system, i):
    """Elements of subdomain i with two edges on Gamma_i."""
    mesh, part = system.mesh, system.part
    ge = set(part.gamma_edges[i].tolist())
    return sum(len(ge & set(mesh.element_edges[e].tolist())) == 2 for e in part.elements_of(i))


def test_schur_spd_small():
    rep = schur_condition(build(2, (2, 1)))
    assert rep.passed and rep.info["lam_min"] > 0


def test_schur_dense_matches_operator(sys2, rng):
    from iphosm.assembly import schur_apply
    S = schur_dense(sys2)
    x = rng.standard_normal(len(S))
    assert np.allclose(S @ x, schur_apply(sys2, x), atol=1e-10 * np.abs(S).max())


def test_schur_lam_min_scales_with_H():
    vals = [schur_condition(build(16, b)).info["lam_min"] for b in [(2, 2), (4, 4), (8, 8)]]
    ratios = np.array(vals[1:]) / np.array(vals[:-1])
    assert np.all((ratios > 0.4) & (ratios < 0.7))


def test_b_spectrum_single_triangle():
    mesh = generate_structured_mesh(1, 1)
    sysm = assemble_system(mesh, partition_from_tags(mesh, np.array([0, 1])), 1, 0.0)
    for i in range(2):
        A, C = sysm.A[i].toarray(), sysm.AiG[i].toarray()
        B = C.T @ np.linalg.solve(A, C)
        hand = np.sort(np.linalg.eigvals(np.linalg.solve(sysm.AGi[i].toarray(), B)).real)
        assert np.allclose(b_spectrum(sysm, i).info["sigma"], hand, atol=1e-12)


@pytest.mark.parametrize("boxes,eta", [((2, 1), 0.0), ((2, 2), 1.0), ((3, 3), 0.0), ((3, 3), 4.0)])
def test_b_spectrum_range_and_kernel(boxes, eta):
    sysm = build(12, boxes, eta=eta)
    for i in range(sysm.n_subdomains):
        nu = b_spectrum(sysm, i).info["nu"]
        assert nu[0] >= -1e-12 and nu[-1] <= 1 + 1e-10
        # the only zero modes come from elements with two interface edges
        assert np.sum(nu < 1e-9) == corner_elements(sysm, i)
        assert spectral.corner_elements(sysm, i) == corner_elements(sysm, i)
        assert b_spectrum(sysm, i).passed


def test_b_spectrum_kernel_present():
    sysm = build(8, (2, 2), eta=0.0)
    assert [corner_elements(sysm, i) for i in range(4)] == [0, 1, 1, 0]


def test_b_spectrum_floating_constant_mode():
    sysm = build(6, (3, 3), eta=0.0)
    nu = b_spectrum(sysm, 4).info["nu"]
    assert nu[-1] == pytest.approx(1.0, abs=1e-10)
    sysm = build(6, (3, 3), eta=1.0)
    assert b_spectrum(sysm, 4).info["nu"][-1] < 1.0


def test_mk_spectrum():
    sysm = build(8, (2, 2), eta=0.0)
    rep = mk_spectrum(sysm, 0)
    assert rep.passed and 0 < rep.info["lam_min"] < rep.info["lam_max"]


def test_generalized_cross_check(sys2):
    B = local_schur(sys2, 0)
    AG = sys2.AGi[0].toarray()
    W = inverse_sqrt_sym(AG)
    C = W @ B @ W
    assert np.allclose(generalized_eig_sym(B, AG), dense_eig_sym(0.5 * (C + C.T)), atol=1e-9)


def test_size_guard(monkeypatch):
    monkeypatch.setattr(spectral, "DENSE_LIMIT", 3)
    with pytest.raises(SizeError):
        schur_dense(build(4, (2, 1)))


def test_contraction_comparison():
    with pytest.raises(ValueError):
        contraction_comparison([1.0, 0.5], 0.1, 0.5, 1, 0.0, 1.0)
    sysm = build(8, (2, 1), eta=1.0)
    res, _ = osm_study(sysm, SchwarzConfig(gamma=1.0))
    rep = contraction_comparison(res.history, sysm.mesh.h, sysm.part.H, 1, 1.0, 1.0, alpha=sysm.alpha)
    assert rep.passed and rep.info["rho_obs"] <= 1.0


def test_classify_contraction():
    hs = np.array([0.1, 0.05, 0.025])
    out = classify_contraction(hs, 1 - 3 * hs, eta_power=0)
    assert out["exponent"] == pytest.approx(1.0) and out["matches_expected"] and out["sharp"]
    out = classify_contraction(hs, 1 - np.sqrt(hs), eta_power=1)
    assert out["matches_expected"] and not out["sharp"]
    out = classify_contraction(hs, np.full(3, 0.6), eta_power=2)
    assert abs(out["exponent"]) < 1e-12 and out["sharp"]


def test_report_csv(tmp_path):
    rep = SpectralReport("x")
    rep.add("q", 0, 2.0, 4.0, True)
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "quantity,level,measured,bound,ratio,pass" and lines[1].startswith("q,0,2,4,0.5,1")


def test_sequence_and_stable_checks():
    assert sequence_check("s", [1, 2, 4.4], 2.0).passed
    assert not sequence_check("s", [1, 2, 6], 2.0).passed
    assert stable_check("t", [1.0, 1.05, 0.95]).passed
    assert not stable_check("t", [1.0, 1.2]).passed


def test_appendix_nonfloating():
    sysm = build(8, (2, 1), eta=1.0)
    rep = verify_appendix_estimates(sysm, 0, samples=200)
    assert rep.passed, rep.failures()
    names = {r.quantity for r in rep.rows}
    for q in ["A2.c_exact", "A3.gap_over_scale", "traceineq.c_exact", "karakashian.c_exact", "RoptEst.c_exact"]:
        assert q in names


def test_appendix_floating_kernel_case():
    sysm = build(6, (3, 3), eta=0.0)
    rep = verify_appendix_estimates(sysm, 4, samples=50)
    assert rep.passed
    assert rep.info["A3_gap"] == pytest.approx(0.0, abs=1e-10)
    Nphi, _, _ = spectral._seminorm_phi(sysm, 4)
    ones = np.ones(len(Nphi))
    assert ones @ Nphi @ ones <= 1e-10 * np.abs(Nphi).max() * len(ones)


def test_appendix_samples_bounded_by_exact():
    sysm = build(6, (3, 3), eta=2.0)
    rep = verify_appendix_estimates(sysm, 4, samples=100, seed=3)
    assert rep.passed


def test_fit_constants():
    reps = []
    for lvl, c in enumerate([1.0, 0.8, 0.6]):
        r = SpectralReport("a")
        r.add("A2.c_exact", lvl, c, 0.0, True)
        r.add("karakashian.c_exact", lvl, 2 * c, 0.0, True)
        reps.append(r)
    assert fit_constants(reps).passed
    reps[2].rows[0].measured = 0.4
    assert not fit_constants(reps).passed


def test_ei_two_subdomains():
    sysm = build(8, (2, 1), eta=0.0)
    rep = ei_contraction_two(sysm)
    assert rep.passed, rep.failures()
    # point symmetry of the split: both E_i have the same singular values
    a, b = rep.info["E_sv"]
    assert np.allclose(a, b, rtol=1e-8, atol=1e-10 * a.max())


def test_ei_rejects_more_subdomains():
    with pytest.raises(ValueError):
        ei_contraction_two(build(4, (2, 2)))
