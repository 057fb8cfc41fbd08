"""Block optimal-control QP solver.

Interior-point method with Mehrotra predictor-corrector steps, a backward
Riccati factorization per iteration, and a hard iteration cap: a capped
solve returns its last (strictly interior, finite) iterate rather than
failing, which is what the controller consumes. Stage data is padded to
uniform sizes; padded columns are zero and stay zero in the solution.

Problem form, per stage k = 0..N (x0 given, not optimized):

    min  sum_k 0.5 x'Q_k x + q_k'x + 0.5 u'R_k u + r_k'u
    s.t. x_{k+1} = A_k x_k + B_k u_k + b_k
         lo_k <= C_k x_k + D_k u_k <= hi_k      (one- or two-sided rows)

Soft-constraint slack variables are ordinary stage inputs with linear
cost and a one-sided nonnegativity row, assembled by the transcription.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _ipm

INF = 1e18  # bounds at or beyond _ipm.INF_BOUND are treated as absent

_STATUS = {0: "converged", 1: "iteration_capped", 2: "diverged"}


@dataclass
class OcpQp:
    """Padded stagewise QP data."""

    N: int
    A: np.ndarray      # (N, nx, nx)
    B: np.ndarray      # (N, nx, nu)
    b: np.ndarray      # (N, nx)
    Q: np.ndarray      # (N+1, nx, nx)
    q: np.ndarray      # (N+1, nx)
    R: np.ndarray      # (N+1, nu, nu)
    r: np.ndarray      # (N+1, nu)
    C: np.ndarray      # (N+1, m_max, nx)
    D: np.ndarray      # (N+1, m_max, nu)
    lo: np.ndarray     # (N+1, m_max)
    hi: np.ndarray     # (N+1, m_max)
    m: np.ndarray      # (N+1,) active row counts
    x0: np.ndarray     # (nx,)
    u_init: np.ndarray = None  # (N+1, nu) initial input iterate, default 0

    @property
    def nx(self) -> int:
        return self.A.shape[1]

    @property
    def nu(self) -> int:
        return self.B.shape[2]

    @property
    def m_max(self) -> int:
        return self.C.shape[1]

    @classmethod
    def zeros(cls, N, nx, nu, m_max) -> "OcpQp":
        return cls(
            N=N,
            A=np.zeros((N, nx, nx)), B=np.zeros((N, nx, nu)), b=np.zeros((N, nx)),
            Q=np.zeros((N + 1, nx, nx)), q=np.zeros((N + 1, nx)),
            R=np.zeros((N + 1, nu, nu)), r=np.zeros((N + 1, nu)),
            C=np.zeros((N + 1, m_max, nx)), D=np.zeros((N + 1, m_max, nu)),
            lo=np.full((N + 1, m_max), -INF), hi=np.full((N + 1, m_max), INF),
            m=np.zeros(N + 1, dtype=np.int64), x0=np.zeros(nx),
            u_init=np.zeros((N + 1, nu)),
        )

    def validate(self):
        N, nx, nu, mm = self.N, self.nx, self.nu, self.m_max
        shapes = {
            "A": (N, nx, nx), "B": (N, nx, nu), "b": (N, nx),
            "Q": (N + 1, nx, nx), "q": (N + 1, nx),
            "R": (N + 1, nu, nu), "r": (N + 1, nu),
            "C": (N + 1, mm, nx), "D": (N + 1, mm, nu),
            "lo": (N + 1, mm), "hi": (N + 1, mm), "x0": (nx,),
            "u_init": (N + 1, nu),
        }
        if self.u_init is None:
            self.u_init = np.zeros((N + 1, nu))
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr[np.abs(arr) < INF])):
                raise ValueError(f"{name} contains non-finite entries")
        if np.any(self.m < 0) or np.any(self.m > mm):
            raise ValueError("row counts out of range")

    def objective(self, dx: np.ndarray, du: np.ndarray) -> float:
        obj = 0.0
        for k in range(self.N + 1):
            obj += 0.5 * dx[k] @ self.Q[k] @ dx[k] + self.q[k] @ dx[k]
            obj += 0.5 * du[k] @ self.R[k] @ du[k] + self.r[k] @ du[k]
        return float(obj)


@dataclass
class QpSolution:
    dx: np.ndarray            # (N+1, nx)
    du: np.ndarray            # (N+1, nu); row N is the terminal slack group
    objective: float
    iterations: int
    status: str
    kkt: float
    lam_lo: np.ndarray = field(repr=False, default=None)
    lam_hi: np.ndarray = field(repr=False, default=None)
    costate: np.ndarray = field(repr=False, default=None)
    s_lo: np.ndarray = field(repr=False, default=None)
    s_hi: np.ndarray = field(repr=False, default=None)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def solve(qp: OcpQp, max_iters: int = 10, tol: float = 1e-6) -> QpSolution:
    """Solve one OCP QP; always returns the last iterate at the cap."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    qp.validate()
    X, U, slo, shi, llo, lhi, nuq, iters, status, kkt = _ipm.solve_ocp(
        qp.N, qp.m, qp.A, qp.B, qp.b, qp.Q, qp.q, qp.R, qp.r,
        qp.C, qp.D, qp.lo, qp.hi, qp.x0, qp.u_init, max_iters, tol)
    return QpSolution(
        dx=X, du=U, objective=qp.objective(X, U), iterations=int(iters),
        status=_STATUS[int(status)], kkt=float(kkt),
        lam_lo=llo, lam_hi=lhi, costate=nuq, s_lo=slo, s_hi=shi)


def solve_batch(qps: list[OcpQp], max_iters: int = 10,
                tol: float = 1e-6) -> list[QpSolution]:
    """Solve same-shaped instances concurrently (one worker per instance)."""
    if not qps:
        return []
    n = len(qps)
    ref = qps[0]
    for qp in qps:
        qp.validate()
        if (qp.N, qp.nx, qp.nu, qp.m_max) != (ref.N, ref.nx, ref.nu, ref.m_max):
            raise ValueError("batch instances must share padded dimensions")

    def stack(name):
        return np.stack([getattr(qp, name) for qp in qps])

    X, U, slo, shi, llo, lhi, nuq, iters, status, kkts = _ipm.solve_ocp_batch(
        ref.N, stack("m"), stack("A"), stack("B"), stack("b"),
        stack("Q"), stack("q"), stack("R"), stack("r"),
        stack("C"), stack("D"), stack("lo"), stack("hi"),
        np.stack([qp.x0 for qp in qps]),
        np.stack([qp.u_init for qp in qps]), max_iters, tol)
    return [
        QpSolution(
            dx=X[i], du=U[i], objective=qps[i].objective(X[i], U[i]),
            iterations=int(iters[i]), status=_STATUS[int(status[i])],
            kkt=float(kkts[i]), lam_lo=llo[i], lam_hi=lhi[i],
            costate=nuq[i], s_lo=slo[i], s_hi=shi[i])
        for i in range(n)
    ]


def kkt_residual(qp: OcpQp, solution: QpSolution) -> float:
    """Infinity norm of stationarity, primal feasibility and complementarity.

    Uses the multipliers attached to the solution; a bare primal iterate
    (zero multipliers) reduces the stationarity part to the plain gradient.
    """
    N, nx, nu = qp.N, qp.nx, qp.nu
    zeros = np.zeros((N + 1, qp.m_max))
    llo = solution.lam_lo if solution.lam_lo is not None else zeros
    lhi = solution.lam_hi if solution.lam_hi is not None else zeros
    nuq = solution.costate if solution.costate is not None else np.zeros((N + 1, nx))
    X, U = solution.dx, solution.du

    worst = 0.0
    for k in range(N + 1):
        mk = int(qp.m[k])
        dl = lhi[k, :mk] - llo[k, :mk]
        ru = qp.R[k] @ U[k] + qp.r[k] + qp.D[k, :mk].T @ dl
        rxv = qp.Q[k] @ X[k] + qp.q[k] + qp.C[k, :mk].T @ dl
        if k < N:
            ru += qp.B[k].T @ nuq[k + 1]
            rxv += qp.A[k].T @ nuq[k + 1]
            dyn = qp.A[k] @ X[k] + qp.B[k] @ U[k] + qp.b[k] - X[k + 1]
            worst = max(worst, float(np.max(np.abs(dyn))))
        if k > 0:
            rxv -= nuq[k]
            worst = max(worst, float(np.max(np.abs(rxv), initial=0.0)))
        worst = max(worst, float(np.max(np.abs(ru), initial=0.0)))
        if mk:
            cv = qp.C[k, :mk] @ X[k] + qp.D[k, :mk] @ U[k]
            has_lo = qp.lo[k, :mk] > -_ipm.INF_BOUND
            has_hi = qp.hi[k, :mk] < _ipm.INF_BOUND
            worst = max(worst, float(np.max((qp.lo[k, :mk] - cv) * has_lo,
                                            initial=0.0)))
            worst = max(worst, float(np.max((cv - qp.hi[k, :mk]) * has_hi,
                                            initial=0.0)))
            if solution.s_lo is not None:
                comp = np.abs(llo[k, :mk] * solution.s_lo[k, :mk]) * has_lo
                worst = max(worst, float(np.max(comp, initial=0.0)))
                comp = np.abs(lhi[k, :mk] * solution.s_hi[k, :mk]) * has_hi
                worst = max(worst, float(np.max(comp, initial=0.0)))
    worst = max(worst, float(np.max(np.abs(X[0] - qp.x0))))
    return worst
