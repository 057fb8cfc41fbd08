import time

import numpy as np
import pytest

from stepstone.qpsolver import INF, OcpQp, QpSolution, kkt_residual, solve, solve_batch


def double_integrator_qp(N=10, dt=0.1, x0=(1.0, 0.0), u_bound=None, m_extra=0):
    qp = OcpQp.zeros(N, nx=2, nu=1, m_max=1 + m_extra if u_bound else m_extra)
    qp.A[:] = np.array([[1.0, dt], [0.0, 1.0]])
    qp.B[:] = np.array([[0.5 * dt * dt], [dt]])
    qp.Q[:] = np.diag([1.0, 0.1])
    qp.Q[N] = np.diag([10.0, 1.0])
    qp.R[:] = np.array([[0.01]])
    qp.R[N] = np.array([[0.0]])
    qp.x0 = np.array(x0)
    if u_bound is not None:
        for k in range(N):
            qp.D[k, 0, 0] = 1.0
            qp.lo[k, 0] = -u_bound
            qp.hi[k, 0] = u_bound
            qp.m[k] = 1
    return qp


def riccati_oracle(qp):
    """Plain textbook discrete Riccati recursion and rollout (no IPM)."""
    N = qp.N
    P = qp.Q[N].copy()
    p = qp.q[N].copy()
    Ks, ks = [], []
    for k in range(N - 1, -1, -1):
        A, B = qp.A[k], qp.B[k]
        Huu = qp.R[k] + B.T @ P @ B
        Hux = B.T @ P @ A
        hu = qp.r[k] + B.T @ (p + P @ qp.b[k])
        K = -np.linalg.solve(Huu, Hux)
        kf = -np.linalg.solve(Huu, hu)
        p = qp.q[k] + A.T @ (p + P @ qp.b[k]) + Hux.T @ kf
        P = qp.Q[k] + A.T @ P @ A + Hux.T @ K
        P = 0.5 * (P + P.T)
        Ks.append(K)
        ks.append(kf)
    Ks.reverse()
    ks.reverse()
    X = np.zeros((N + 1, qp.nx))
    U = np.zeros((N + 1, qp.nu))
    X[0] = qp.x0
    for k in range(N):
        U[k] = Ks[k] @ X[k] + ks[k]
        X[k + 1] = qp.A[k] @ X[k] + qp.B[k] @ U[k] + qp.b[k]
    return X, U


class TestUnconstrained:
    def test_lqr_matches_riccati_oracle(self):
        qp = double_integrator_qp(N=10)
        sol = solve(qp, max_iters=10)
        X, U = riccati_oracle(qp)
        assert sol.status == "converged"
        assert np.max(np.abs(sol.dx - X)) <= 1e-6
        assert np.max(np.abs(sol.du - U)) <= 1e-6

    def test_matches_dense_kkt_on_random_instances(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            N = int(rng.integers(2, 6))
            nx = int(rng.integers(1, 5))
            nu = int(rng.integers(1, 4))
            qp = OcpQp.zeros(N, nx, nu, 0)
            qp.x0 = rng.standard_normal(nx)
            for k in range(N):
                qp.A[k] = rng.standard_normal((nx, nx)) * 0.7
                qp.B[k] = rng.standard_normal((nx, nu))
                qp.b[k] = 0.3 * rng.standard_normal(nx)
            for k in range(N + 1):
                G = rng.standard_normal((nx, nx))
                qp.Q[k] = G @ G.T + 0.5 * np.eye(nx)
                H = rng.standard_normal((nu, nu))
                qp.R[k] = H @ H.T + 0.5 * np.eye(nu)
                qp.q[k] = rng.standard_normal(nx)
                qp.r[k] = rng.standard_normal(nu)
            qp.R[N] = np.eye(nu)  # terminal slack group unused
            qp.r[N] = 0.0
            sol = solve(qp)
            Xd, Ud = _dense_kkt_oracle(qp)
            assert np.max(np.abs(sol.dx - Xd)) <= 1e-8
            assert np.max(np.abs(sol.du[:N] - Ud)) <= 1e-8


def _dense_kkt_oracle(qp):
    """Equality-constrained QP solved as one dense KKT system."""
    N, nx, nu = qp.N, qp.nx, qp.nu
    nz = N * nx + N * nu  # x_1..x_N then u_0..u_{N-1}
    H = np.zeros((nz, nz))
    g = np.zeros(nz)
    for k in range(1, N + 1):
        i = (k - 1) * nx
        H[i:i + nx, i:i + nx] = qp.Q[k]
        g[i:i + nx] = qp.q[k]
    for k in range(N):
        i = N * nx + k * nu
        H[i:i + nu, i:i + nu] = qp.R[k]
        g[i:i + nu] = qp.r[k]
    # dynamics rows: x_{k+1} - A x_k - B u_k = b_k (x_0 known, moved to rhs)
    Aeq = np.zeros((N * nx, nz))
    beq = np.zeros(N * nx)
    for k in range(N):
        row = k * nx
        if k > 0:
            Aeq[row:row + nx, (k - 1) * nx:k * nx] = -qp.A[k]
        Aeq[row:row + nx, k * nx:(k + 1) * nx] = np.eye(nx)
        Aeq[row:row + nx, N * nx + k * nu:N * nx + (k + 1) * nu] = -qp.B[k]
        beq[row:row + nx] = qp.b[k] + (qp.A[k] @ qp.x0 if k == 0 else 0.0)
    KKT = np.block([[H, Aeq.T], [Aeq, np.zeros((N * nx, N * nx))]])
    rhs = np.concatenate([-g, beq])
    z = np.linalg.solve(KKT, rhs)
    X = np.zeros((N + 1, nx))
    U = np.zeros((N, nu))
    X[0] = qp.x0
    for k in range(1, N + 1):
        X[k] = z[(k - 1) * nx:(k - 1) * nx + nx]
    for k in range(N):
        U[k] = z[N * nx + k * nu:N * nx + (k + 1) * nu]
    return X, U


class TestConstrained:
    def test_scalar_clipped_optimum(self):
        # min (u-1)^2 s.t. u <= 0.5
        qp = OcpQp.zeros(1, nx=1, nu=1, m_max=1)
        qp.A[0] = [[1.0]]
        qp.R[0] = [[2.0]]
        qp.r[0] = [-2.0]
        qp.D[0, 0, 0] = 1.0
        qp.hi[0, 0] = 0.5
        qp.m[0] = 1
        sol = solve(qp)
        assert abs(sol.du[0, 0] - 0.5) <= 1e-6

    def test_box_constrained_matches_active_set_enumeration(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            qp = double_integrator_qp(N=4, x0=(2.0, 0.0), u_bound=1.0)
            qp.q[1:] = 0.2 * rng.standard_normal((qp.N, 2))
            sol = solve(qp, max_iters=50, tol=1e-9)
            u_star = _box_active_set_oracle(qp, 1.0)
            assert np.max(np.abs(sol.du[:qp.N, 0] - u_star)) <= 1e-6

    def test_iteration_cap_returns_finite(self):
        qp = double_integrator_qp(N=10, x0=(5.0, -2.0), u_bound=0.5)
        for cap in (1, 2, 3):
            sol = solve(qp, max_iters=cap)
            assert np.all(np.isfinite(sol.dx)) and np.all(np.isfinite(sol.du))
            assert sol.iterations <= cap
            assert sol.status in ("iteration_capped", "converged")

    def test_two_sided_and_equality_rows(self):
        # pin u0 = 0.3 via a zero-width row, then track x ref
        qp = double_integrator_qp(N=5)
        qp = OcpQp.zeros(5, 2, 1, 1)
        qp.A[:] = np.array([[1.0, 0.1], [0.0, 1.0]])
        qp.B[:] = np.array([[0.005], [0.1]])
        qp.Q[:] = np.eye(2)
        qp.R[:] = [[0.1]]
        qp.x0 = np.array([1.0, 0.0])
        qp.D[0, 0, 0] = 1.0
        qp.lo[0, 0] = 0.3
        qp.hi[0, 0] = 0.3
        qp.m[0] = 1
        sol = solve(qp, max_iters=50)
        assert abs(sol.du[0, 0] - 0.3) <= 1e-5


def _box_active_set_oracle(qp, u_max):
    """Brute-force active-set enumeration on the condensed problem."""
    N = qp.N
    # condense: x_k = F_k u + g_k
    F = [np.zeros((2, N))]
    g = [qp.x0.copy()]
    for k in range(N):
        Fk = qp.A[k] @ F[-1]
        Fk[:, k:k + 1] += qp.B[k]
        F.append(Fk)
        g.append(qp.A[k] @ g[-1] + qp.b[k])
    H = np.zeros((N, N))
    f = np.zeros(N)
    for k in range(N + 1):
        H += F[k].T @ qp.Q[k] @ F[k]
        f += F[k].T @ (qp.Q[k] @ g[k] + qp.q[k])
        if k < N:
            H[k, k] += qp.R[k][0, 0]
            f[k] += qp.r[k][0]
    best, best_obj = None, np.inf
    for mask in range(3 ** N):
        sel = []
        mm = mask
        for _ in range(N):
            sel.append(mm % 3)  # 0 free, 1 at +u_max, 2 at -u_max
            mm //= 3
        free = [i for i, s in enumerate(sel) if s == 0]
        u = np.array([0.0 if s == 0 else (u_max if s == 1 else -u_max)
                      for s in sel])
        if free:
            Hf = H[np.ix_(free, free)]
            rhs = -(f[free] + H[np.ix_(free, [i for i in range(N)
                                              if i not in free])]
                    @ u[[i for i in range(N) if i not in free]])
            u[free] = np.linalg.solve(Hf, rhs)
        if np.any(np.abs(u) > u_max + 1e-9):
            continue
        grad = H @ u + f
        ok = True
        for i, s in enumerate(sel):
            if s == 1 and grad[i] > 1e-9:
                ok = False
            if s == 2 and grad[i] < -1e-9:
                ok = False
            if s == 0 and abs(grad[i]) > 1e-7:
                ok = False
        if not ok:
            continue
        obj = 0.5 * u @ H @ u + f @ u
        if obj < best_obj:
            best_obj, best = obj, u
    assert best is not None, "oracle found no KKT point"
    return best


class TestKktResidual:
    def test_converged_solution_small_residual(self):
        qp = double_integrator_qp(N=10, u_bound=1.0)
        sol = solve(qp, max_iters=50)
        assert kkt_residual(qp, sol) <= 1e-6

    def test_zero_iterate_equals_gradient_norm(self):
        qp = double_integrator_qp(N=4)
        qp.q[:] = 0.3
        qp.r[:] = -0.7
        qp.x0 = np.zeros(2)
        zero = QpSolution(dx=np.zeros((5, 2)), du=np.zeros((5, 1)),
                          objective=0.0, iterations=0, status="iteration_capped",
                          kkt=np.inf)
        res = kkt_residual(qp, zero)
        assert abs(res - 0.7) <= 1e-12

    def test_perturbation_increases_residual(self):
        qp = double_integrator_qp(N=6, u_bound=1.0)
        sol = solve(qp, max_iters=50)
        base = kkt_residual(qp, sol)
        sol.du = sol.du.copy()
        sol.du[2, 0] += 1e-3
        assert kkt_residual(qp, sol) > base


class TestInvariants:
    def test_objective_not_worse_than_feasible_zero(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            qp = double_integrator_qp(N=6, x0=(0.0, 0.0), u_bound=1.0)
            qp.q[:] = rng.standard_normal(qp.q.shape)
            qp.r[:qp.N] = rng.standard_normal((qp.N, 1))
            sol = solve(qp, max_iters=50)
            assert sol.objective <= 1e-9  # zero iterate is feasible, obj 0

    def test_linear_time_scaling_in_horizon(self):
        times = {}
        for N in (25, 50):
            qp = double_integrator_qp(N=N, u_bound=1.0)
            solve(qp, max_iters=10)  # warm the jit and caches
            reps = 20
            t0 = time.perf_counter()
            for _ in range(reps):
                solve(qp, max_iters=10)
            times[N] = (time.perf_counter() - t0) / reps
        assert times[50] / times[25] <= 4.0  # linear within factor-2 tolerance

    def test_diverged_on_overflowing_data(self):
        qp = double_integrator_qp(N=4, u_bound=1.0)
        qp.Q[:] = np.eye(2) * 1e308
        qp.q[:] = 1e308
        sol = solve(qp, max_iters=10)
        assert sol.status == "diverged"

    def test_batch_matches_single(self):
        qps = [double_integrator_qp(N=8, x0=(x0, 0.0), u_bound=0.8)
               for x0 in (1.0, -2.0, 0.3)]
        singles = [solve(qp, max_iters=10) for qp in qps]
        batch = solve_batch(qps, max_iters=10)
        for s, b in zip(singles, batch):
            np.testing.assert_array_equal(s.dx, b.dx)
            np.testing.assert_array_equal(s.du, b.du)
            assert s.status == b.status
