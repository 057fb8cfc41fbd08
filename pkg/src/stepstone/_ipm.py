"""Numba core of the Riccati-recursion primal-dual interior-point solver.

One QP instance is described by padded stage arrays (see qpsolver.OcpQp).
Padded input/constraint columns are zero, which keeps the algebra uniform:
the padded entries of every iterate stay exactly zero. The initial state
is fixed (eliminated), so the equality residuals are zero throughout and
each Newton system reduces to one backward Riccati factorization plus two
right-hand-side passes (Mehrotra predictor and corrector reuse the same
stage factorizations).

Status codes: 0 converged, 1 iteration capped, 2 diverged.
"""

import numpy as np
from numba import njit, prange

INF_BOUND = 1e17
FTB = 0.995  # fraction-to-boundary
REG = 1e-9


@njit(cache=True)
def _objective(N, X, U, Q, qlin, R, rlin):
    obj = 0.0
    for k in range(N + 1):
        x = X[k]
        u = U[k]
        obj += 0.5 * x @ (Q[k] @ x) + qlin[k] @ x
        obj += 0.5 * u @ (R[k] @ u) + rlin[k] @ u
    return obj


@njit(cache=True)
def _kkt_residuals(N, m, A, B, Q, qlin, R, rlin, C, D, lo, hi,
                   X, U, slo, shi, llo, lhi, nuq):
    """(stationarity, primal violation, complementarity) infinity norms."""
    stat = 0.0
    viol = 0.0
    comp = 0.0
    nx = Q.shape[1]
    nu = R.shape[1]
    for k in range(N + 1):
        mk = m[k]
        ru = R[k] @ U[k] + rlin[k]
        rx = Q[k] @ X[k] + qlin[k]
        for j in range(mk):
            dl = lhi[k, j] - llo[k, j]
            for c in range(nu):
                ru[c] += D[k, j, c] * dl
            for c in range(nx):
                rx[c] += C[k, j, c] * dl
        if k < N:
            ru += B[k].T @ nuq[k + 1]
            rx += A[k].T @ nuq[k + 1]
        if k > 0:
            rx -= nuq[k]
            for c in range(nx):
                if abs(rx[c]) > stat:
                    stat = abs(rx[c])
        for c in range(nu):
            if abs(ru[c]) > stat:
                stat = abs(ru[c])
        for j in range(mk):
            cv = C[k, j] @ X[k] + D[k, j] @ U[k]
            if lo[k, j] > -INF_BOUND:
                if lo[k, j] - cv > viol:
                    viol = lo[k, j] - cv
                cc = abs(slo[k, j] * llo[k, j])
                if cc > comp:
                    comp = cc
            if hi[k, j] < INF_BOUND:
                if cv - hi[k, j] > viol:
                    viol = cv - hi[k, j]
                cc = abs(shi[k, j] * lhi[k, j])
                if cc > comp:
                    comp = cc
    return stat, viol, comp


@njit(cache=True)
def _riccati_factor(N, A, B, Qt, Rt, St, P, Kg, Huu):
    """Backward value-function sweep; stores gains and stage Hessians."""
    nu = Rt.shape[1]
    reg = REG * np.eye(nu)
    H = Rt[N] + reg
    Kg[N] = -np.linalg.solve(H, St[N])
    P[N] = Qt[N] + St[N].T @ Kg[N]
    P[N] = 0.5 * (P[N] + P[N].T)
    Huu[N] = H
    for k in range(N - 1, -1, -1):
        PA = P[k + 1] @ A[k]
        PB = P[k + 1] @ B[k]
        H = Rt[k] + B[k].T @ PB + reg
        Hux = St[k] + B[k].T @ PA
        Kg[k] = -np.linalg.solve(H, Hux)
        P[k] = Qt[k] + A[k].T @ PA + Hux.T @ Kg[k]
        P[k] = 0.5 * (P[k] + P[k].T)
        Huu[k] = H
    return np.isfinite(P).all() and np.isfinite(Kg).all()


@njit(cache=True)
def _riccati_rhs(N, m, A, B, C, D, rx, ru, wv, Kg, Huu, pv, kff):
    """Feedforward terms for one right-hand side, reusing the factor sweep."""
    nx = A.shape[1]
    nu = B.shape[2]
    rtx = np.empty(nx)
    rtu = np.empty(nu)
    for k in range(N, -1, -1):
        for c in range(nx):
            rtx[c] = rx[k, c]
        for c in range(nu):
            rtu[c] = ru[k, c]
        for j in range(m[k]):
            w = wv[k, j]
            if w != 0.0:
                for c in range(nx):
                    rtx[c] += C[k, j, c] * w
                for c in range(nu):
                    rtu[c] += D[k, j, c] * w
        if k < N:
            rtu += B[k].T @ pv[k + 1]
            rtx += A[k].T @ pv[k + 1]
        kff[k] = -np.linalg.solve(Huu[k], rtu)
        # K^T h_u stands in for Hux^T kff (Hux = -Huu K)
        pv[k] = rtx + Kg[k].T @ (-Huu[k] @ kff[k])


@njit(cache=True)
def solve_ocp(N, m, A, B, bvec, Q, qlin, R, rlin, C, D, lo, hi, x0, u_init,
              max_iters, tol):
    nx = Q.shape[1]
    nu = R.shape[1]
    mmax = C.shape[1]

    X = np.zeros((N + 1, nx))
    U = u_init.copy()
    slo = np.ones((N + 1, mmax))
    shi = np.ones((N + 1, mmax))
    llo = np.zeros((N + 1, mmax))
    lhi = np.zeros((N + 1, mmax))
    nuq = np.zeros((N + 1, nx))

    X[0] = x0
    for k in range(N):
        X[k + 1] = A[k] @ X[k] + B[k] @ U[k] + bvec[k]

    # slacks start at unit scale or the actual row residual, whichever is
    # larger, and duals balance them to unit complementarity products, so
    # badly scaled rows neither distort the first Newton systems nor
    # inflate the initial barrier parameter
    nbar = 0
    for k in range(N + 1):
        for j in range(m[k]):
            cv = C[k, j] @ X[k] + D[k, j] @ U[k]
            if lo[k, j] > -INF_BOUND:
                nbar += 1
                slo[k, j] = max(1.0, abs(cv - lo[k, j]))
                llo[k, j] = 1.0 / slo[k, j]
            if hi[k, j] < INF_BOUND:
                nbar += 1
                shi[k, j] = max(1.0, abs(hi[k, j] - cv))
                lhi[k, j] = 1.0 / shi[k, j]

    P = np.zeros((N + 1, nx, nx))
    pv = np.zeros((N + 1, nx))
    Kg = np.zeros((N + 1, nu, nx))
    kff = np.zeros((N + 1, nu))
    Qt = np.zeros((N + 1, nx, nx))
    Rt = np.zeros((N + 1, nu, nu))
    St = np.zeros((N + 1, nu, nx))
    Huu = np.zeros((N + 1, nu, nu))
    rx = np.zeros((N + 1, nx))
    ru = np.zeros((N + 1, nu))
    rslo = np.zeros((N + 1, mmax))
    rshi = np.zeros((N + 1, mmax))
    rclo = np.zeros((N + 1, mmax))
    rchi = np.zeros((N + 1, mmax))
    wv = np.zeros((N + 1, mmax))
    dX = np.zeros((N + 1, nx))
    dU = np.zeros((N + 1, nu))
    dnu = np.zeros((N + 1, nx))
    dslo = np.zeros((N + 1, mmax))
    dshi = np.zeros((N + 1, mmax))
    dllo = np.zeros((N + 1, mmax))
    dlhi = np.zeros((N + 1, mmax))
    aslo = np.zeros((N + 1, mmax))
    ashi = np.zeros((N + 1, mmax))
    allo = np.zeros((N + 1, mmax))
    alhi = np.zeros((N + 1, mmax))

    it = 0
    kkt = np.inf
    for it in range(1, max_iters + 1):
        stat, viol, comp = _kkt_residuals(
            N, m, A, B, Q, qlin, R, rlin, C, D, lo, hi,
            X, U, slo, shi, llo, lhi, nuq)
        kkt = max(stat, max(viol, comp))
        if not np.isfinite(kkt):
            return X, U, slo, shi, llo, lhi, nuq, it - 1, 2, kkt
        if kkt <= tol:
            return X, U, slo, shi, llo, lhi, nuq, it - 1, 0, kkt

        mu = 0.0
        if nbar > 0:
            for k in range(N + 1):
                for j in range(m[k]):
                    if lo[k, j] > -INF_BOUND:
                        mu += slo[k, j] * llo[k, j]
                    if hi[k, j] < INF_BOUND:
                        mu += shi[k, j] * lhi[k, j]
            mu /= nbar

        # stage residuals and barrier weights
        for k in range(N + 1):
            mk = m[k]
            Qt[k] = Q[k]
            Rt[k] = R[k]
            St[k] = 0.0
            r_u = R[k] @ U[k] + rlin[k]
            r_x = Q[k] @ X[k] + qlin[k]
            for j in range(mk):
                cv = C[k, j] @ X[k] + D[k, j] @ U[k]
                sig = 0.0
                if lo[k, j] > -INF_BOUND:
                    rslo[k, j] = cv - slo[k, j] - lo[k, j]
                    sig += llo[k, j] / slo[k, j]
                else:
                    rslo[k, j] = 0.0
                if hi[k, j] < INF_BOUND:
                    rshi[k, j] = cv + shi[k, j] - hi[k, j]
                    sig += lhi[k, j] / shi[k, j]
                else:
                    rshi[k, j] = 0.0
                dl = lhi[k, j] - llo[k, j]
                for c in range(nu):
                    r_u[c] += D[k, j, c] * dl
                for c in range(nx):
                    r_x[c] += C[k, j, c] * dl
                if sig != 0.0:
                    Cr = C[k, j]
                    Dr = D[k, j]
                    Qt[k] += sig * np.outer(Cr, Cr)
                    Rt[k] += sig * np.outer(Dr, Dr)
                    St[k] += sig * np.outer(Dr, Cr)
            if k < N:
                r_u += B[k].T @ nuq[k + 1]
                r_x += A[k].T @ nuq[k + 1]
            if k > 0:
                r_x -= nuq[k]
            else:
                r_x[:] = 0.0  # x0 fixed: no stationarity row
            rx[k] = r_x
            ru[k] = r_u

        ok = _riccati_factor(N, A, B, Qt, Rt, St, P, Kg, Huu)
        if not ok:
            return X, U, slo, shi, llo, lhi, nuq, it, 2, kkt

        sigma_mu = 0.0
        for pass_id in range(2):
            # complementarity right-hand sides
            for k in range(N + 1):
                for j in range(m[k]):
                    if pass_id == 0:
                        rclo[k, j] = -slo[k, j] * llo[k, j]
                        rchi[k, j] = -shi[k, j] * lhi[k, j]
                    else:
                        rclo[k, j] = (sigma_mu - slo[k, j] * llo[k, j]
                                      - aslo[k, j] * allo[k, j])
                        rchi[k, j] = (sigma_mu - shi[k, j] * lhi[k, j]
                                      - ashi[k, j] * alhi[k, j])
                    w = 0.0
                    if hi[k, j] < INF_BOUND:
                        w += (rchi[k, j] + lhi[k, j] * rshi[k, j]) / shi[k, j]
                    if lo[k, j] > -INF_BOUND:
                        w -= (rclo[k, j] - llo[k, j] * rslo[k, j]) / slo[k, j]
                    wv[k, j] = w

            _riccati_rhs(N, m, A, B, C, D, rx, ru, wv, Kg, Huu, pv, kff)

            dX[0] = 0.0
            for k in range(N + 1):
                dU[k] = Kg[k] @ dX[k] + kff[k]
                if k < N:
                    dX[k + 1] = A[k] @ dX[k] + B[k] @ dU[k]
                if k > 0:
                    dnu[k] = P[k] @ dX[k] + pv[k]

            for k in range(N + 1):
                for j in range(m[k]):
                    dc = C[k, j] @ dX[k] + D[k, j] @ dU[k]
                    if hi[k, j] < INF_BOUND:
                        dshi[k, j] = -rshi[k, j] - dc
                        dlhi[k, j] = (rchi[k, j]
                                      - lhi[k, j] * dshi[k, j]) / shi[k, j]
                    else:
                        dshi[k, j] = 0.0
                        dlhi[k, j] = 0.0
                    if lo[k, j] > -INF_BOUND:
                        dslo[k, j] = rslo[k, j] + dc
                        dllo[k, j] = (rclo[k, j]
                                      - llo[k, j] * dslo[k, j]) / slo[k, j]
                    else:
                        dslo[k, j] = 0.0
                        dllo[k, j] = 0.0

            if pass_id == 0:
                if nbar == 0:
                    break  # no barriers: the affine step is the Newton step
                a_aff = 1.0
                for k in range(N + 1):
                    for j in range(m[k]):
                        if hi[k, j] < INF_BOUND:
                            if dshi[k, j] < 0:
                                a_aff = min(a_aff, -shi[k, j] / dshi[k, j])
                            if dlhi[k, j] < 0:
                                a_aff = min(a_aff, -lhi[k, j] / dlhi[k, j])
                        if lo[k, j] > -INF_BOUND:
                            if dslo[k, j] < 0:
                                a_aff = min(a_aff, -slo[k, j] / dslo[k, j])
                            if dllo[k, j] < 0:
                                a_aff = min(a_aff, -llo[k, j] / dllo[k, j])
                mu_aff = 0.0
                for k in range(N + 1):
                    for j in range(m[k]):
                        if lo[k, j] > -INF_BOUND:
                            mu_aff += ((slo[k, j] + a_aff * dslo[k, j])
                                       * (llo[k, j] + a_aff * dllo[k, j]))
                        if hi[k, j] < INF_BOUND:
                            mu_aff += ((shi[k, j] + a_aff * dshi[k, j])
                                       * (lhi[k, j] + a_aff * dlhi[k, j]))
                mu_aff /= nbar
                if mu > 0:
                    sigma_mu = min((mu_aff / mu) ** 3, 1.0) * mu
                else:
                    sigma_mu = 0.0
                aslo[:] = dslo
                ashi[:] = dshi
                allo[:] = dllo
                alhi[:] = dlhi

        # one shared step length: asymmetric primal/dual steps let the
        # multipliers run away from the iterate on stiff stage data
        a_p = 1.0
        a_d = 1.0
        for k in range(N + 1):
            for j in range(m[k]):
                if hi[k, j] < INF_BOUND:
                    if dshi[k, j] < 0:
                        a_p = min(a_p, -FTB * shi[k, j] / dshi[k, j])
                    if dlhi[k, j] < 0:
                        a_d = min(a_d, -FTB * lhi[k, j] / dlhi[k, j])
                if lo[k, j] > -INF_BOUND:
                    if dslo[k, j] < 0:
                        a_p = min(a_p, -FTB * slo[k, j] / dslo[k, j])
                    if dllo[k, j] < 0:
                        a_d = min(a_d, -FTB * llo[k, j] / dllo[k, j])
        alpha = min(a_p, a_d)

        X += alpha * dX
        U += alpha * dU
        slo += alpha * dslo
        shi += alpha * dshi
        llo += alpha * dllo
        lhi += alpha * dlhi
        nuq += alpha * dnu

        if not (np.isfinite(X).all() and np.isfinite(U).all()):
            return X, U, slo, shi, llo, lhi, nuq, it, 2, kkt

    stat, viol, comp = _kkt_residuals(
        N, m, A, B, Q, qlin, R, rlin, C, D, lo, hi,
        X, U, slo, shi, llo, lhi, nuq)
    kkt = max(stat, max(viol, comp))
    status = 1
    if not np.isfinite(kkt):
        status = 2
    elif kkt <= tol:
        status = 0
    return X, U, slo, shi, llo, lhi, nuq, it, status, kkt


@njit(cache=True, parallel=True)
def solve_ocp_batch(N, m, A, B, bvec, Q, qlin, R, rlin, C, D, lo, hi, x0,
                    u_init, max_iters, tol):
    """Solve n independent instances (leading axis) in parallel."""
    n = A.shape[0]
    nx = Q.shape[2]
    nu = R.shape[2]
    mmax = C.shape[2]
    X = np.zeros((n, N + 1, nx))
    U = np.zeros((n, N + 1, nu))
    SLO = np.zeros((n, N + 1, mmax))
    SHI = np.zeros((n, N + 1, mmax))
    LLO = np.zeros((n, N + 1, mmax))
    LHI = np.zeros((n, N + 1, mmax))
    NUQ = np.zeros((n, N + 1, nx))
    iters = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int64)
    kkts = np.zeros(n)
    for i in prange(n):
        (X[i], U[i], SLO[i], SHI[i], LLO[i], LHI[i], NUQ[i],
         it_i, st_i, kkt_i) = solve_ocp(
            N, m[i], A[i], B[i], bvec[i], Q[i], qlin[i], R[i], rlin[i],
            C[i], D[i], lo[i], hi[i], x0[i], u_init[i], max_iters, tol)
        iters[i] = it_i
        status[i] = st_i
        kkts[i] = kkt_i
    return X, U, SLO, SHI, LLO, LHI, NUQ, iters, status, kkts
