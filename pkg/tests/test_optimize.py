import numpy as np
import pytest

import cfrs
from cfrs import closed_form as cf
from cfrs import optimize as opt


def setup_instance(seed=1, L=4, K=2, N=2, tau_p=2, var=1e-3, rho=0.5, n=None):
    cfg = cfrs.SystemConfig(L=L, K=K, N=N, tau_p=tau_p, tau_c=20, seed=seed)
    net = cfrs.build_network(cfg)
    pilots = cfrs.assign_pilots(K, tau_p)
    phases = cfrs.PhaseStatistics(var, var)
    stats = cfrs.estimation_statistics(net, pilots, phases, cfg)
    terms = cf.TraceTerms.compute(net, stats, pilots)
    problem = opt.build_maxmin_problem(terms, phases, cfg, rho, n=n)
    return cfg, net, pilots, phases, stats, terms, problem


# ---------------------------------------------------------------------------
# power-split search
# ---------------------------------------------------------------------------

def test_optimal_rho_unimodal_synthetic():
    rho, val = opt.optimal_rho(lambda r: -((r - 0.3) ** 2), tol=1e-3)
    assert abs(rho - 0.3) <= 1e-3
    assert val == pytest.approx(0.0, abs=1e-6)


def test_optimal_rho_decreasing_returns_zero():
    rho, val = opt.optimal_rho(lambda r: 1.0 - r, tol=1e-3)
    assert rho == 0.0
    assert val == 1.0


def test_optimal_rho_never_below_endpoints():
    # adversarial bumpy objective: result must still match an endpoint at least
    def bumpy(r):
        return np.sin(13 * r) * 0.2 + (1 - r) * 0.5

    rho, val = opt.optimal_rho(bumpy, tol=1e-3)
    assert val >= max(bumpy(0.0), bumpy(1.0))


def test_optimal_rho_validates_tolerances():
    with pytest.raises(ValueError):
        opt.optimal_rho(lambda r: r, tol=0.0)
    with pytest.raises(ValueError):
        opt.optimal_rho(lambda r: r, tol=1e-3, delta=1e-3)


def test_optimal_rho_matches_grid_on_closed_form():
    cfg, net, pilots, phases, stats, terms, _ = setup_instance(seed=2)
    plan0 = cf.make_plan(terms, "du_mr", "coherent", 0.0)

    def sse(r):
        return cf.evaluate_plan(terms, plan0.replace_rho(r), phases, cfg).sum_se

    rho, best = opt.optimal_rho(sse)
    grid = np.linspace(0.0, 1.0, 1000)
    grid_best = max(sse(r) for r in grid)
    assert best >= grid_best - 1e-3


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------

def test_psd_sqrt_roundtrip_and_repair():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 5))
    mat = A @ A.T
    root = opt.psd_sqrt(mat)
    assert np.allclose(root @ root, mat, atol=1e-10 * np.linalg.norm(mat))
    tiny = mat - 1e-14 * np.trace(mat) / 5 * np.eye(5)
    opt.psd_sqrt(tiny)  # repairable


def test_psd_sqrt_rejects_indefinite():
    with pytest.raises(ValueError):
        opt.psd_sqrt(np.diag([1.0, -0.5]))


def test_single_ue_theta_is_trq():
    cfg, net, pilots, phases, stats, terms, problem = setup_instance(K=1, tau_p=1)
    assert problem.Theta.shape == (cfg.L, 1, 1)
    assert np.allclose(problem.Theta[:, 0, 0], terms.tr_Q[0], rtol=1e-12)


def test_orthogonal_pilots_make_blocks_diagonal():
    cfg, net, pilots, phases, stats, terms, problem = setup_instance(
        K=2, tau_p=2, L=3
    )
    for l in range(cfg.L):
        off = problem.Theta[l] - np.diag(np.diag(problem.Theta[l]))
        assert np.all(off == 0)
    for k in range(cfg.K):
        for mat in (problem.H[k], problem.M[k]):
            assert np.all(mat - np.diag(np.diag(mat)) == 0)


def test_theta_gram_identity_against_common_power():
    cfg, net, pilots, phases, stats, terms, problem = setup_instance(
        K=4, tau_p=2, L=3
    )
    rng = np.random.default_rng(11)
    tr_Qc = terms.tr_Qc.real
    for _ in range(100):
        a = rng.uniform(0, 2, size=cfg.K * cfg.L)
        w = problem.weights_matrix(a)  # (K, L)
        direct = 0.0
        for l in range(cfg.L):
            for k in range(cfg.K):
                for i in range(cfg.K):
                    direct += w[k, l] * w[i, l] * tr_Qc[k, i, l]
        quad = sum(
            a[l * cfg.K:(l + 1) * cfg.K]
            @ problem.Theta[l].real
            @ a[l * cfg.K:(l + 1) * cfg.K]
            for l in range(cfg.L)
        )
        assert quad == pytest.approx(direct, rel=1e-10)


def test_problem_sinr_matches_closed_form_with_unit_eta():
    cfg, net, pilots, phases, stats, terms, problem = setup_instance(
        seed=5, K=4, tau_p=2, L=3, rho=0.35
    )
    rng = np.random.default_rng(4)
    for _ in range(10):
        w = rng.uniform(0, 1e4, size=(cfg.K, cfg.L))
        plan = cf.make_plan(terms, "du_mr", "coherent", 0.35, weights=w, unit_eta=True)
        via_closed = cf.common_sinr_coherent(terms, plan, phases, cfg, problem.instant)
        via_problem = problem.sinr(problem.stack_weights(w))
        assert np.allclose(via_closed, via_problem, rtol=1e-10)


def test_problem_xi_matches_private_interference():
    cfg, net, pilots, phases, stats, terms, problem = setup_instance(seed=7)
    plan = cf.make_plan(terms, "du_mr", "coherent", 0.0)
    # reconstruct xi from the coherent private SINR at full power
    sinr = cf.private_sinr_coherent(terms, plan, phases, cfg, problem.instant)
    lam = cfg.estimation_instant
    ea = np.exp(-(problem.instant - lam) * phases.var_ap)
    eu = np.exp(-(problem.instant - lam) * phases.var_ue)
    parts = cf._private_parts(terms, plan.mu, cf._theta_eff(terms, "du_mr"))
    sig = ea * eu * cfg.p_d * parts[3]
    xi_implied = (sig / sinr - cfg.sigma2_dl + sig) / cfg.p_d
    assert np.allclose(problem.xi, xi_implied, rtol=1e-10)


def test_rho_zero_problem_rejected():
    with pytest.raises(ValueError):
        setup_instance(rho=0.0)


def test_problem_matrix_invariants():
    # Theta/H PSD, M PSD, b real non-negative, on contaminated instances
    for seed in (1, 5, 9):
        cfg, net, pilots, phases, stats, terms, problem = setup_instance(
            seed=seed, K=4, tau_p=2, L=3
        )
        assert np.all(problem.b >= 0)
        for l in range(problem.L):
            assert np.linalg.eigvalsh(problem.Theta[l]).min() >= -1e-10
        for k in range(problem.K):
            assert np.linalg.eigvalsh(problem.H[k]).min() >= -1e-10
            assert np.linalg.eigvalsh(problem.M[k]).min() >= -1e-10


# ---------------------------------------------------------------------------
# feasibility oracle
# ---------------------------------------------------------------------------

def test_zero_target_is_feasible():
    *_, problem = setup_instance(seed=3)
    verdict = opt.check_feasibility(problem, 0.0)
    assert verdict.feasible
    assert verdict.max_violation <= 1e-8


def test_above_norm_bound_is_infeasible():
    # orthogonal pilots: Theta is diagonal PD, so the weight box is bounded
    *_, problem = setup_instance(seed=4, K=2, tau_p=2, L=2)
    lam_min = min(np.linalg.eigvalsh(problem.Theta[l]).min() for l in range(problem.L))
    b_norm = max(np.linalg.norm(problem.b[k]) for k in range(problem.K))
    noise_floor = float(np.min(problem.p_dp * problem.xi) + problem.sigma2)
    bound = (
        problem.p_dc * problem.eta_ap * problem.eta_ue
        * (problem.K * problem.L / lam_min) * b_norm**2 / noise_floor
    )
    verdict = opt.check_feasibility(problem, 2.0 * bound)
    assert not verdict.feasible


def test_feasible_set_is_down_closed():
    *_, problem = setup_instance(seed=6)
    res = opt.robust_common_precoding(problem, eps=1e-3)
    t_star = res.achieved_t
    for frac in (0.15, 0.5, 0.85):
        verdict = opt.check_feasibility(problem, frac * t_star)
        assert verdict.feasible
        assert np.min(problem.sinr(verdict.point)) >= frac * t_star - 1e-8


def test_feasible_point_passes_direct_verification():
    *_, problem = setup_instance(seed=8)
    verdict = opt.check_feasibility(problem, 0.1)
    assert verdict.feasible
    assert np.all(verdict.point >= 0)
    assert np.all(problem.power_norms(verdict.point) <= 1 + 1e-8)
    assert opt._verify_point(problem, verdict.point, 0.1) <= 1e-8


# ---------------------------------------------------------------------------
# robust precoding
# ---------------------------------------------------------------------------

def test_robust_beats_simple_baseline_and_stays_feasible():
    for seed in (1, 2, 3):
        cfg, net, pilots, phases, stats, terms, problem = setup_instance(
            seed=seed, K=2, tau_p=1, L=4
        )
        simple = opt.scaled_simple_weights(problem)
        t_simple = float(np.min(problem.sinr(simple)))
        res = opt.robust_common_precoding(problem, start_point=simple)
        assert res.achieved_t >= t_simple - 1e-12
        a = problem.stack_weights(res.weights)
        assert opt._verify_point(problem, a, res.achieved_t) <= 1e-8
        achieved = float(np.min(problem.sinr(a)))
        assert res.bracket[0] - 1e-9 <= achieved <= res.bracket[1] + 1e-9


def test_robust_single_ue_hits_numeric_optimum():
    cfg, net, pilots, phases, stats, terms, problem = setup_instance(
        seed=9, K=1, tau_p=1, L=2
    )
    res = opt.robust_common_precoding(problem, eps=1e-6)
    # brute numeric maximization over the 2-d box (Theta is diagonal here)
    amax = 1.0 / np.sqrt(problem.Theta[:, 0, 0].real)
    grid = np.stack(
        np.meshgrid(np.linspace(0, amax[0], 200), np.linspace(0, amax[1], 200),
                    indexing="ij"),
        axis=-1,
    ).reshape(-1, 2)
    norms = grid**2 * problem.Theta[:, 0, 0].real[None, :]
    feasible = grid[(norms <= 1.0).all(axis=1)]
    best = max(float(np.min(problem.sinr(a))) for a in feasible)
    assert res.achieved_t == pytest.approx(best, rel=5e-3)
    # optimum saturates the per-AP power at both APs for a single UE
    assert np.allclose(problem.power_norms(problem.stack_weights(res.weights)),
                       1.0, atol=1e-4)


def test_bottleneck_user_cannot_be_lifted_further():
    # the bisection's t* is tight: t* + margin is certified infeasible, and
    # every user sits at or above t* at the returned point
    cfg, net, pilots, phases, stats, terms, problem = setup_instance(
        seed=12, K=3, tau_p=1, L=5
    )
    res = opt.robust_common_precoding(
        problem, eps=1e-6, start_point=opt.scaled_simple_weights(problem)
    )
    sinrs = problem.sinr(problem.stack_weights(res.weights))
    assert np.all(sinrs >= res.achieved_t - 1e-9)
    beyond = opt.check_feasibility(problem, res.achieved_t * 1.01)
    assert not beyond.feasible


def test_bisection_trace_emitted():
    *_, problem = setup_instance(seed=10)
    res = opt.robust_common_precoding(problem, eps=1e-3, verbose=False)
    events = {e["event"] for e in res.trace}
    assert "bisect" in events
    assert res.iterations > 0
