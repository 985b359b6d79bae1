"""Power-split search and max-min robust precoding of the common stream.

Two optimizers operate on the closed-form expressions:

* ``optimal_rho`` — derivative-sign binary search over the common/private
  power split rho in [0, 1], probing a small forward difference at each
  midpoint.  Globally optimal for unimodal sum SE, best-seen otherwise,
  and never worse than the better endpoint.

* ``robust_common_precoding`` — maximizes the minimum per-UE common-stream
  SINR at one instant over non-negative combining weights a[k,l], subject
  to per-AP power E{||v_c,l||^2} <= 1 (the common normalization is
  absorbed, so the returned weights are used with unit eta).  The problem
  is quasi-concave; a bisection over the target t solves a second-order
  cone feasibility program per step.  Feasibility is decided through a
  max-slack reformulation: the slack optimum is the largest margin by
  which the SINR cone constraints can be met, so a negative optimum
  certifies infeasibility while a feasible verdict is additionally
  re-verified against every original constraint.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

try:
    import cvxpy as cp
except ImportError as _exc:  # pragma: no cover
    cp = None
    _CVXPY_ERROR = _exc

from .closed_form import TraceTerms, _private_parts, _theta_eff, uniform_mu
from .model import PhaseStatistics, SystemConfig

log = logging.getLogger(__name__)


class SolverIndeterminate(RuntimeError):
    """The feasibility subproblem did not converge to a usable verdict."""


# ---------------------------------------------------------------------------
# power-splitting factor (binary search on the derivative sign)
# ---------------------------------------------------------------------------

def optimal_rho(evaluator, tol: float = 1e-3, delta: float | None = None):
    """Search [0, 1] for the power split maximizing ``evaluator(rho)``.

    At each midpoint the sign of a forward difference with step ``delta``
    (default tol/100, must satisfy 0 < delta << tol) decides which half to
    keep; the best value ever evaluated is tracked and returned.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if delta is None:
        delta = tol / 100.0
    if not 0 < delta < tol:
        raise ValueError("need 0 < delta < tol")

    rho_min, rho_max = 0.0, 1.0
    candidates = [(evaluator(0.0), 0.0), (evaluator(1.0), 1.0)]
    best_sse, best_rho = max(candidates, key=lambda t: t[0])
    while rho_max - rho_min > tol:
        rho_next = 0.5 * (rho_max + rho_min)
        sse_next = evaluator(rho_next)
        sse_probe = evaluator(rho_next + delta)
        if sse_probe > sse_next:
            rho_min = rho_next
        else:
            rho_max = rho_next
        if sse_next > best_sse:
            best_sse, best_rho = sse_next, rho_next
    return best_rho, best_sse


# ---------------------------------------------------------------------------
# max-min problem assembly
# ---------------------------------------------------------------------------

def psd_sqrt(mat: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    """Hermitian square root with PSD repair.

    Slightly negative eigenvalues (above -rel_tol relative to the largest)
    are clamped to zero; anything more negative indicates a construction
    bug and raises.
    """
    vals, vecs = np.linalg.eigh(mat)
    floor = -rel_tol * max(vals[-1], 1e-300) if vals.size else 0.0
    if vals.size and vals[0] < min(floor, -rel_tol):
        raise ValueError(
            f"matrix is not PSD: min eigenvalue {vals[0]:.3e} vs max {vals[-1]:.3e}"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)[None, :]) @ np.conj(vecs.T)


@dataclass(frozen=True)
class MaxMinProblem:
    """Data of the max-min common-SINR program at one instant.

    The stacked weight vector a lives in R^{KL} ordered AP-major
    (index l*K + i).  For each UE k, the SINR at target decay factors
    (ea, eu) reads

        p_dc*ea*eu*(a.b_k)^2 /
        (p_dc*(1-ea)*a'H_k a + p_dc*a'M_k a + p_dc*ea*(1-eu)*(a.b_k)^2
         + p_dp*xi_k + sigma2)

    subject to ||Theta_l^{1/2} a_l|| <= 1 per AP and a >= 0.
    """

    b: np.ndarray          # (K, KL) real
    H: np.ndarray          # (K, KL, KL)
    M: np.ndarray          # (K, KL, KL)
    Theta: np.ndarray      # (L, K, K)
    xi: np.ndarray         # (K,) private interference at the chosen instant
    p_dc: float
    p_dp: float
    eta_ap: float
    eta_ue: float
    sigma2: float
    instant: int

    def __post_init__(self):
        for arr in (self.b, self.H, self.M, self.Theta, self.xi):
            arr.setflags(write=False)

    @property
    def K(self) -> int:
        return self.b.shape[0]

    @property
    def L(self) -> int:
        return self.Theta.shape[0]

    def weights_matrix(self, a: np.ndarray) -> np.ndarray:
        """Reshape a stacked KL vector back to (K, L) weights."""
        return a.reshape(self.L, self.K).T

    def stack_weights(self, w: np.ndarray) -> np.ndarray:
        return w.T.reshape(-1)

    def sinr(self, a: np.ndarray) -> np.ndarray:
        """(K,) common-stream SINRs at the problem's instant for weights a."""
        ab = self.b @ a
        quad_h = np.einsum("i,kij,j->k", a, self.H, a).real
        quad_m = np.einsum("i,kij,j->k", a, self.M, a).real
        num = self.p_dc * self.eta_ap * self.eta_ue * ab**2
        den = (
            self.p_dc * (1.0 - self.eta_ap) * quad_h
            + self.p_dc * quad_m
            + self.p_dc * self.eta_ap * (1.0 - self.eta_ue) * ab**2
            + self.p_dp * self.xi
            + self.sigma2
        )
        return num / den

    def power_norms(self, a: np.ndarray) -> np.ndarray:
        """(L,) values of ||Theta_l^{1/2} a_l||."""
        w = a.reshape(self.L, self.K)
        return np.sqrt(
            np.maximum(np.einsum("lk,lki,li->l", w, self.Theta, w).real, 0.0)
        )


def build_maxmin_problem(
    terms: TraceTerms,
    phases: PhaseStatistics,
    config: SystemConfig,
    rho: float,
    n: int | None = None,
) -> MaxMinProblem:
    """Assemble b_k, H_k, M_k, Theta_l and the constants at instant n.

    Zero entries follow the pilot structure exactly: b and H vanish off
    UE k's co-pilot set, M off UE i's.  The private interference constant
    uses delay-compensated MR precoding with the per-AP normalization.
    Default instant: mid-block.
    """
    if rho <= 0:
        raise ValueError("the common stream needs rho > 0")
    K, L = terms.K, terms.L
    lam = config.estimation_instant
    if n is None:
        n = math.ceil((lam + config.tau_c) / 2)
    if not lam <= n <= config.tau_c:
        raise ValueError(f"instant must lie in [{lam}, {config.tau_c}]")
    gap = n - lam
    eta_ap = float(np.exp(-gap * phases.var_ap))
    eta_ue = float(np.exp(-gap * phases.var_ue))

    tr_Qc = terms.tr_Qc.real  # real for the supported correlation models
    imag_leak = np.max(np.abs(terms.tr_Qc.imag)) if terms.tr_Qc.size else 0.0
    if imag_leak > 1e-9 * max(np.max(np.abs(tr_Qc)), 1e-300):
        raise ValueError("estimate cross-traces are not real; unsupported correlation")

    # b_k stacked AP-major: entry l*K + i = tr(Qc[k,i,l]) on k's pilot group
    b = np.transpose(tr_Qc, (0, 2, 1)).reshape(K, K * L)

    H = np.zeros((K, K * L, K * L))
    M = np.zeros((K, K * L, K * L))
    tr_QcR = terms.tr_QcR.real
    for k in range(K):
        for l in range(L):
            sl = slice(l * K, (l + 1) * K)
            tau = tr_Qc[k, :, l]
            H[k][sl, sl] = np.outer(tau, tau)
            M[k][sl, sl] = tr_QcR[:, :, k, l]

    Theta = np.transpose(tr_Qc, (2, 0, 1)).copy()  # (L, K, K)

    mu = uniform_mu(terms)
    parts = _private_parts(terms, mu, _theta_eff(terms, "du_mr"))
    total, percontam, coherent = parts[0], parts[1], parts[2]
    xi = total + (1.0 - eta_ap) * percontam + eta_ap * coherent

    return MaxMinProblem(
        b=b,
        H=H,
        M=M,
        Theta=Theta,
        xi=xi,
        p_dc=rho * config.p_d,
        p_dp=(1.0 - rho) * config.p_d,
        eta_ap=eta_ap,
        eta_ue=eta_ue,
        sigma2=config.sigma2_dl,
        instant=int(n),
    )


# ---------------------------------------------------------------------------
# feasibility oracle and bisection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeasibilityVerdict:
    feasible: bool
    point: np.ndarray | None
    max_violation: float
    iterations: int
    slack: float


def _verify_point(problem: MaxMinProblem, a: np.ndarray, t: float) -> float:
    """Largest violation of the original cone program at (a, t)."""
    sig = math.sqrt(problem.p_dc * problem.eta_ap * problem.eta_ue)
    c_h = math.sqrt(problem.p_dc * (1.0 - problem.eta_ap))
    c_m = math.sqrt(problem.p_dc)
    c_b = math.sqrt(problem.p_dc * problem.eta_ap * (1.0 - problem.eta_ue))
    viol = float(np.max(-a, initial=0.0))
    viol = max(viol, float(np.max(problem.power_norms(a) - 1.0)))
    for k in range(problem.K):
        hq = float(np.einsum("i,ij,j->", a, problem.H[k], a).real)
        mq = float(np.einsum("i,ij,j->", a, problem.M[k], a).real)
        ab = float(problem.b[k] @ a)
        u_norm = math.sqrt(
            max(c_h**2 * hq, 0.0)
            + max(c_m**2 * mq, 0.0)
            + (c_b * ab) ** 2
            + problem.p_dp * problem.xi[k]
            + problem.sigma2
        )
        viol = max(viol, math.sqrt(t) * u_norm - sig * ab)
    return viol


def check_feasibility(
    problem: MaxMinProblem, t: float, tol_feas: float = 1e-8
) -> FeasibilityVerdict:
    """Decide whether min-UE common SINR >= t is achievable.

    Solved as max-slack: maximize s so every SINR cone holds with margin s
    under the power and sign constraints.  s* >= 0 yields a point that is
    re-verified directly; s* < 0 certifies infeasibility with margin |s*|
    (the converged optimum bounds the achievable margin from above).
    """
    if cp is None:  # pragma: no cover
        raise SolverIndeterminate(f"cvxpy unavailable: {_CVXPY_ERROR}")
    if t < 0:
        raise ValueError("t must be >= 0")
    K, L = problem.K, problem.L
    dim = K * L

    # variable scaling: bring the power constraint to O(1)
    scale = math.sqrt(max(np.max(problem.Theta.real.diagonal(0, 1, 2)), 1e-300))
    b_s = problem.b / scale
    theta_sqrt = np.stack(
        [psd_sqrt(problem.Theta[l] / scale**2).real for l in range(L)]
    )
    H_sqrt = [psd_sqrt(problem.H[k] / scale**2).real for k in range(K)]
    M_sqrt = [psd_sqrt(problem.M[k] / scale**2).real for k in range(K)]

    sig = math.sqrt(problem.p_dc * problem.eta_ap * problem.eta_ue)
    c_h = math.sqrt(problem.p_dc * (1.0 - problem.eta_ap))
    c_m = math.sqrt(problem.p_dc)
    c_b = math.sqrt(problem.p_dc * problem.eta_ap * (1.0 - problem.eta_ue))
    sqrt_t = math.sqrt(t)

    a_var = cp.Variable(dim, nonneg=True)
    s_var = cp.Variable()
    constraints = []
    # redundant but exact coordinate caps (entrywise-nonnegative Theta and
    # a >= 0 imply a_il^2 Theta[ii] <= a' Theta a <= 1); they keep the
    # problem explicitly bounded when pilot sharing makes Theta rank-deficient
    caps = np.concatenate(
        [1.0 / np.sqrt(np.diag(problem.Theta[l]).real / scale**2) for l in range(L)]
    )
    constraints.append(a_var <= caps)
    for l in range(L):
        constraints.append(cp.norm(theta_sqrt[l] @ a_var[l * K:(l + 1) * K]) <= 1.0)
    for k in range(K):
        # per-row normalization by the constant noise floor keeps cones O(1)
        row = 1.0 / math.sqrt(problem.p_dp * problem.xi[k] + problem.sigma2)
        u_k = cp.hstack(
            [
                row * c_h * (H_sqrt[k] @ a_var),
                row * c_m * (M_sqrt[k] @ a_var),
                cp.reshape(row * c_b * (b_s[k] @ a_var), (1,), order="F"),
                np.ones(1),
            ]
        )
        constraints.append(cp.SOC(row * sig * (b_s[k] @ a_var) - s_var, sqrt_t * u_k))

    prob = cp.Problem(cp.Maximize(s_var), constraints)
    solved = False
    for solver, kwargs in (
        (cp.CLARABEL, {}),
        (cp.SCS, {"eps": 1e-9, "max_iters": 200_000}),
    ):
        try:
            with warnings.catch_warnings():
                # inaccurate-solution warnings are handled via verification
                warnings.simplefilter("ignore", UserWarning)
                prob.solve(solver=solver, **kwargs)
        except cp.error.SolverError:
            continue
        if prob.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            solved = True
            break
    if not solved:
        raise SolverIndeterminate(
            f"feasibility solvers failed at t={t} (last status {prob.status!r})"
        )
    iterations = int(prob.solver_stats.num_iters or 0)
    slack = float(s_var.value)

    if slack < 0.0:
        return FeasibilityVerdict(
            feasible=False, point=None, max_violation=-slack,
            iterations=iterations, slack=slack,
        )

    a = np.asarray(a_var.value).reshape(-1) / scale
    a = np.clip(a, 0.0, None)
    norms = problem.power_norms(a)
    over = norms > 1.0
    if np.any(over):  # exact repair of roundoff power overshoot
        w = a.reshape(L, K)
        w[over] /= norms[over, None]
        a = w.reshape(-1)
    violation = _verify_point(problem, a, t)
    if violation > tol_feas:
        if prob.status == cp.OPTIMAL_INACCURATE or slack < tol_feas:
            return FeasibilityVerdict(
                feasible=False, point=None, max_violation=violation,
                iterations=iterations, slack=slack,
            )
        raise SolverIndeterminate(
            f"solver claimed feasibility at t={t} but the point violates "
            f"constraints by {violation:.3e}"
        )
    return FeasibilityVerdict(
        feasible=True, point=a, max_violation=violation,
        iterations=iterations, slack=slack,
    )


@dataclass(frozen=True)
class RobustPrecodingResult:
    weights: np.ndarray        # (K, L) combining weights, unit-eta semantics
    achieved_t: float
    bracket: tuple[float, float]
    iterations: int
    trace: tuple[dict, ...] = field(default=())


def scaled_simple_weights(problem: MaxMinProblem) -> np.ndarray:
    """All-ones weights rescaled per AP to the power boundary (stacked KL).

    Equivalent to running the all-ones weights through the statistical
    common normalization.
    """
    a = np.ones(problem.K * problem.L)
    norms = problem.power_norms(a)
    w = a.reshape(problem.L, problem.K)
    w /= np.maximum(norms, 1e-300)[:, None]
    return w.reshape(-1)


def robust_common_precoding(
    problem: MaxMinProblem,
    t_min: float | None = None,
    t_max: float | None = None,
    eps: float = 1e-4,
    tol_feas: float = 1e-8,
    start_point: np.ndarray | None = None,
    verbose: bool = False,
) -> RobustPrecodingResult:
    """Bisection on the max-min common SINR target.

    Brackets [t_min, t_max] are auto-derived when not supplied: t_min = 0
    (always feasible via a = 0) and t_max doubled from 1 until infeasible.
    Returns the weights from the last feasible target; plugging them into
    the coherent common SINR with unit eta achieves min-UE SINR within the
    final bracket at the problem's instant.
    """
    trace: list[dict] = []
    total_iters = 0

    def record(event, **kw):
        entry = {"event": event, **kw}
        trace.append(entry)
        if verbose:
            log.info(json.dumps(entry))

    if t_min is None:
        t_min = 0.0
        best_point = np.zeros(problem.K * problem.L)
    else:
        verdict = check_feasibility(problem, t_min, tol_feas)
        total_iters += verdict.iterations
        if not verdict.feasible:
            raise ValueError(f"supplied t_min={t_min} is not feasible")
        best_point = verdict.point
    if start_point is not None:
        cand = float(np.min(problem.sinr(start_point)))
        if cand > t_min and _verify_point(problem, start_point, cand) <= tol_feas:
            t_min, best_point = cand, np.asarray(start_point, dtype=float)
            record("warm_start", t_min=t_min)

    if t_max is None:
        t_max = max(1.0, 2.0 * t_min)
        while True:
            verdict = check_feasibility(problem, t_max, tol_feas)
            total_iters += verdict.iterations
            record("bracket", t_max=t_max, feasible=verdict.feasible)
            if not verdict.feasible:
                break
            t_min, best_point = t_max, verdict.point
            t_max *= 2.0
            if t_max > 1e12:
                raise SolverIndeterminate("failed to bracket an infeasible target")

    while t_max - t_min > eps:
        t = 0.5 * (t_max + t_min)
        try:
            verdict = check_feasibility(problem, t, tol_feas)
        except SolverIndeterminate as exc:
            raise SolverIndeterminate(
                f"{exc} (bisection bracket was [{t_min}, {t_max}])"
            ) from exc
        total_iters += verdict.iterations
        record(
            "bisect", t=t, feasible=verdict.feasible,
            violation=verdict.max_violation, bracket=[t_min, t_max],
        )
        if verdict.feasible:
            t_min, best_point = t, verdict.point
        else:
            t_max = t

    return RobustPrecodingResult(
        weights=problem.weights_matrix(best_point),
        achieved_t=float(t_min),
        bracket=(float(t_min), float(t_max)),
        iterations=total_iters,
        trace=tuple(trace),
    )
