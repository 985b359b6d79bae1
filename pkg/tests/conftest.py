import pytest

import cfrs


@pytest.fixture(scope="session")
def desk():
    """Small shared instance: 4 APs, 2 UEs, 2 antennas, short block."""
    cfg = cfrs.SystemConfig(L=4, K=2, N=2, tau_p=2, tau_c=20, seed=1)
    net = cfrs.build_network(cfg)
    phases = cfrs.PhaseStatistics.from_config(cfg)
    pilots = cfrs.assign_pilots(cfg.K, cfg.tau_p)
    stats = cfrs.estimation_statistics(net, pilots, phases, cfg)
    terms = cfrs.TraceTerms.compute(net, stats, pilots)
    return cfg, net, pilots, phases, stats, terms


@pytest.fixture(scope="session")
def desk_batch(desk):
    """100k-realization batch on the desk instance, phases at lam, lam+5, tau_c."""
    cfg, net, pilots, phases, stats, terms = desk
    lam = cfg.estimation_instant
    instants = [lam, lam + 5, cfg.tau_c]
    batch = cfrs.sample_batch(net, pilots, phases, cfg, 100_000, seed=7, instants=instants)
    return batch, instants


def random_instance(rng, L=None, K=None, N=None, tau_p=None, correlation=None):
    """Random small system for property sweeps."""
    L = L or int(rng.integers(2, 7))
    K = K or int(rng.integers(1, 5))
    N = N or int(rng.integers(1, 4))
    tau_p = tau_p or int(rng.integers(1, K + 1))
    correlation = correlation or ("exponential" if rng.random() < 0.5 else "uncorrelated")
    cfg = cfrs.SystemConfig(
        L=L, K=K, N=N, tau_p=tau_p, tau_c=max(tau_p + 5, 20),
        seed=int(rng.integers(0, 2**31)),
        correlation=correlation,
        corr_r=float(rng.uniform(-0.8, 0.8)) if correlation == "exponential" else 0.0,
    )
    net = cfrs.build_network(cfg)
    pilots = cfrs.assign_pilots(cfg.K, cfg.tau_p)
    phases = cfrs.PhaseStatistics(
        var_ap=float(rng.uniform(0, 3e-3)), var_ue=float(rng.uniform(0, 3e-3))
    )
    stats = cfrs.estimation_statistics(net, pilots, phases, cfg)
    terms = cfrs.TraceTerms.compute(net, stats, pilots)
    return cfg, net, pilots, phases, stats, terms
