"""Pilot assignment and MMSE channel-estimation statistics under phase drift.

Pilots are time-multiplexed: UE k transmits only at instant t_k in
{1..tau_p} and shares it with the co-pilot set P_k.  Channels are estimated
at the first data instant lambda = tau_p + 1, so each estimate carries the
accumulated oscillator drift over lambda - t_k instants.  The Bayesian
(MMSE) estimate of h[k,l] from the group's pilot observation has covariance

    Q[k,l] = p_k * exp(-(lambda - t_k)*(var_ap + var_ue)) * R Psi R,
    Psi[k,l] = (sum_{i in P_k} p_i R[i,l] + sigma2 * I)^(-1),

and the cross-covariance between the estimates of co-pilot UEs k and i is
Q_cross[k,i,l] = sqrt(p_k p_i) * exp(...) * R[i,l] Psi[k,l] R[k,l] (zero
for UEs on different pilots).  NMSE = tr(R - Q)/tr(R) for MMSE; the LS NMSE
is exp(+(lambda-t_k)(var_ap+var_ue)) * tr(Psi^-1) / (p_k tr R) - 1 and can
exceed one because the LS estimate and its error are correlated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import NetworkModel, PhaseStatistics, SystemConfig


@dataclass(frozen=True)
class PilotAssignment:
    """Pilot instants t (K,), values in 1..tau_p, plus the co-pilot groups."""

    t: np.ndarray
    tau_p: int

    def __post_init__(self):
        self.t.setflags(write=False)
        if np.any(self.t < 1) or np.any(self.t > self.tau_p):
            raise ValueError("pilot instants must lie in 1..tau_p")

    @property
    def K(self) -> int:
        return self.t.shape[0]

    @property
    def groups(self) -> tuple[tuple[int, ...], ...]:
        """Co-pilot sets, one tuple per occupied pilot instant."""
        out = []
        for inst in sorted(set(self.t.tolist())):
            out.append(tuple(int(k) for k in np.flatnonzero(self.t == inst)))
        return tuple(out)

    @property
    def copilot(self) -> np.ndarray:
        """(K, K) boolean mask, True where UEs share a pilot instant."""
        return self.t[:, None] == self.t[None, :]


def assign_pilots(
    K: int, tau_p: int, policy: str = "round_robin", seed: int | None = None
) -> PilotAssignment:
    """Assign pilot instants to UEs.

    ``round_robin`` gives UE k (1-based) instant ((k-1) mod tau_p) + 1 so
    contamination appears as soon as K > tau_p; ``random`` draws uniformly.
    """
    if tau_p < 1:
        raise ValueError("tau_p must be >= 1")
    if policy == "round_robin":
        t = (np.arange(K) % tau_p) + 1
    elif policy == "random":
        rng = np.random.default_rng(seed)
        t = rng.integers(1, tau_p + 1, size=K)
    else:
        raise ValueError(f"unknown pilot policy {policy!r}")
    return PilotAssignment(t=t.astype(int), tau_p=tau_p)


@dataclass(frozen=True)
class EstimationStatistics:
    """Second-order statistics of the channel estimates.

    Psi (K, L, N, N): inverse of the group pilot covariance (Hermitian PD).
    Q (K, L, N, N): estimate covariance, 0 <= Q <= R in the PSD order.
    Q_cross (K, K, L, N, N): estimate cross-covariance for co-pilot pairs,
        zero off-group; Q_cross[k, k, l] == Q[k, l].
    nmse_mmse / nmse_ls (K, L): normalized MSE of the two estimators.
    """

    Psi: np.ndarray
    Q: np.ndarray
    Q_cross: np.ndarray
    nmse_mmse: np.ndarray
    nmse_ls: np.ndarray

    def __post_init__(self):
        for arr in (self.Psi, self.Q, self.Q_cross, self.nmse_mmse, self.nmse_ls):
            arr.setflags(write=False)


def _check_hermitian(R: np.ndarray, tol: float = 1e-10):
    dev = np.max(np.abs(R - np.conj(np.swapaxes(R, -1, -2))))
    scale = max(np.max(np.abs(R)), 1e-300)
    if dev > tol * max(scale, 1.0):
        raise ValueError("correlation matrices must be Hermitian")


def _hpd_inverse(mat: np.ndarray) -> np.ndarray:
    """Inverse of a Hermitian positive-definite matrix via Cholesky.

    Non-PD input is an upstream bug, not something to paper over with a
    pseudo-inverse, so factorization failure raises.
    """
    try:
        c, low = cho_factor(mat)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "pilot covariance is not positive definite; "
            "check correlation matrices and noise power"
        ) from exc
    return cho_solve((c, low), np.eye(mat.shape[0], dtype=complex))


def decay_factors(pilots: PilotAssignment, phases: PhaseStatistics) -> np.ndarray:
    """(K,) amplitude decay exp(-(lambda - t_k)(var_ap + var_ue)) per UE."""
    gaps = pilots.tau_p + 1 - pilots.t
    return np.exp(-gaps * phases.var_sum)


def estimation_statistics(
    net: NetworkModel,
    pilots: PilotAssignment,
    phases: PhaseStatistics,
    config: SystemConfig,
) -> EstimationStatistics:
    """Compute Psi, Q, Q_cross and both NMSE matrices for every link."""
    K, L, N = net.K, net.L, net.N
    if pilots.K != K:
        raise ValueError("pilot assignment size does not match network")
    _check_hermitian(net.R)
    p = config.pilot_powers()
    sigma2 = config.sigma2_ul
    decay = decay_factors(pilots, phases)

    Psi = np.empty((K, L, N, N), dtype=complex)
    Q = np.empty((K, L, N, N), dtype=complex)
    Q_cross = np.zeros((K, K, L, N, N), dtype=complex)
    nmse_ls = np.empty((K, L))

    for group in pilots.groups:
        members = np.asarray(group)
        for l in range(L):
            pilot_cov = sigma2 * np.eye(N, dtype=complex)
            for i in members:
                pilot_cov = pilot_cov + p[i] * net.R[i, l]
            Psi_gl = _hpd_inverse(pilot_cov)
            tr_pilot_cov = np.trace(pilot_cov).real
            for k in members:
                Psi[k, l] = Psi_gl
                PsiR_k = Psi_gl @ net.R[k, l]
                Q[k, l] = p[k] * decay[k] * net.R[k, l] @ PsiR_k
                for i in members:
                    Q_cross[k, i, l] = (
                        np.sqrt(p[k] * p[i]) * decay[k] * net.R[i, l] @ PsiR_k
                    )
                tr_R = np.trace(net.R[k, l]).real
                nmse_ls[k, l] = tr_pilot_cov / (decay[k] * p[k] * tr_R) - 1.0

    tr_R = np.einsum("klnn->kl", net.R).real
    tr_Q = np.einsum("klnn->kl", Q).real
    nmse_mmse = (tr_R - tr_Q) / tr_R

    return EstimationStatistics(
        Psi=Psi, Q=Q, Q_cross=Q_cross, nmse_mmse=nmse_mmse, nmse_ls=nmse_ls
    )


def nmse_ls(
    net: NetworkModel,
    pilots: PilotAssignment,
    phases: PhaseStatistics,
    config: SystemConfig,
) -> np.ndarray:
    """(K, L) NMSE of the least-squares estimator (may exceed one)."""
    return estimation_statistics(net, pilots, phases, config).nmse_ls


def mmse_filter_matrices(
    net: NetworkModel,
    pilots: PilotAssignment,
    phases: PhaseStatistics,
    config: SystemConfig,
    stats: EstimationStatistics | None = None,
) -> np.ndarray:
    """(K, L, N, N) linear MMSE filters B with hhat = theta* . B @ z.

    B[k,l] = sqrt(p_k) * exp(-(lambda-t_k)(var_ap+var_ue)/2) * R Psi; the
    remaining conj(theta[k,l]) factor is applied by the caller so the same
    filters serve both the scalar and the batched estimation paths.
    """
    if stats is None:
        stats = estimation_statistics(net, pilots, phases, config)
    p = config.pilot_powers()
    amp = np.sqrt(p * decay_factors(pilots, phases))
    return amp[:, None, None, None] * np.einsum(
        "klab,klbc->klac", net.R, stats.Psi
    )


def mmse_estimate_realization(
    z: np.ndarray,
    k: int,
    l: int,
    stats: EstimationStatistics,
    net: NetworkModel,
    pilots: PilotAssignment,
    phases: PhaseStatistics,
    config: SystemConfig,
) -> np.ndarray:
    """MMSE estimate of h[k,l] at the estimation instant from one pilot rx z."""
    if z.shape != (net.N,):
        raise ValueError(f"pilot observation must have shape ({net.N},)")
    p = config.pilot_powers()
    amp = np.sqrt(p[k] * decay_factors(pilots, phases)[k])
    return amp * np.conj(net.theta[k, l]) * (net.R[k, l] @ (stats.Psi[k, l] @ z))
