"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Each function loops over time steps in Python and vectorizes over the
sample axis, so results agree with the compiled path to rounding.
"""
import numpy as np


def linear_recurrence(P, W, x0):
    P = np.ascontiguousarray(P, dtype=float)
    W = np.ascontiguousarray(W, dtype=float)
    n = P.shape[0]
    if P.shape[1] != n or W.shape[1] != n or len(x0) != n:
        raise ValueError("shape mismatch in linear_recurrence")
    X = np.empty((W.shape[0] + 1, n))
    X[0] = x0
    for k in range(W.shape[0]):
        X[k + 1] = P @ X[k] + W[k]
    return X


def lti_rk4_batch(A, B, E, X0, U, h, every):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    E = np.asarray(E, dtype=float)
    U = np.asarray(U, dtype=float)
    S, n = A.shape[0], A.shape[1]
    N = (U.shape[0] - 1) // 2
    K = N // every + 1
    out = np.empty((S, K, n))
    if n == 0 or S == 0:
        return out
    if U.shape[1] != B.shape[2] or E.shape[1] != n or X0.shape[1] != n:
        raise ValueError("shape mismatch in lti_rk4_batch")

    def f(x, g):
        return np.einsum("sij,sj->si", A, x) + g

    def forcing(k):  # B u + E at half step k, shape (S, n)
        return np.einsum("sic,c->si", B, U[k]) + E

    x = np.array(X0, dtype=float)
    out[:, 0] = x
    g0 = forcing(0)
    for k in range(N):
        g1, g2 = forcing(2 * k + 1), forcing(2 * k + 2)
        k1 = f(x, g0)
        k2 = f(x + 0.5 * h * k1, g1)
        k3 = f(x + 0.5 * h * k2, g1)
        k4 = f(x + h * k3, g2)
        g0 = g2
        x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if (k + 1) % every == 0:
            out[:, (k + 1) // every] = x
    return out


def _st_rhs(x, u, th, c):
    m, lf, lr, kf, kr, Tf, Tr = c
    Jz, Bf, Br, ws, ds = th.T
    psi_d, beta, v, Ff, Fr, delta, ddelta = x.T
    vx = v * np.cos(beta)
    vy = v * np.sin(beta)
    alpha_f = delta - np.arctan((lf * psi_d + vy) / vx)
    alpha_r = -np.arctan((vy - lr * psi_d) / vx)
    cd = np.cos(delta)
    return np.stack([
        (lf * Ff * cd - lr * Fr) / Jz,
        (Ff * cd + Fr) / (m * v) - psi_d,
        (-Ff * np.sin(delta - beta) + Fr * np.sin(beta)) / m,
        (kf * np.arctan(Bf * alpha_f) - Ff) / Tf,
        (kr * np.arctan(Br * alpha_r) - Fr) / Tr,
        ddelta,
        ws * ws * (u - delta) - 2.0 * ds * ws * ddelta,
    ], axis=1)


def single_track_batch(theta, consts, v0, U, h, every, v_min):
    theta = np.asarray(theta, dtype=float)
    U = np.asarray(U, dtype=float)
    S = theta.shape[0]
    N = (U.shape[0] - 1) // 2
    K = N // every + 1
    Y = np.empty((S, K))
    status = np.zeros(S, dtype=np.int64)
    fail = np.full(S, -1, dtype=np.int64)
    x = np.zeros((S, 7))
    x[:, 2] = v0
    Y[:, 0] = 0.0
    alive = np.ones(S, dtype=bool)
    with np.errstate(all="ignore"):
        for k in range(N):
            th = theta[alive]
            xa = x[alive]
            k1 = _st_rhs(xa, U[2 * k], th, consts)
            k2 = _st_rhs(xa + 0.5 * h * k1, U[2 * k + 1], th, consts)
            k3 = _st_rhs(xa + 0.5 * h * k2, U[2 * k + 1], th, consts)
            k4 = _st_rhs(xa + h * k3, U[2 * k + 2], th, consts)
            xa = xa + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            x[alive] = xa
            bad = ~np.all(np.isfinite(xa), axis=1)
            slow = ~bad & (xa[:, 2] <= v_min)
            if np.any(bad | slow):
                idx = np.flatnonzero(alive)
                status[idx[bad]] = 2
                status[idx[slow]] = 1
                dead = idx[bad | slow]
                fail[dead] = k + 1
                Y[dead, -(-(k + 1) // every):] = np.nan
                alive[dead] = False
            if (k + 1) % every == 0:
                Y[alive, (k + 1) // every] = x[alive, 0]
            if not alive.any():
                break
    return Y, status, fail
