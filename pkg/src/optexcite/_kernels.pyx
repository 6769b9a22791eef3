# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror optexcite._kernels_py."""
import numpy as np

from libc.math cimport sin, cos, atan, isfinite, NAN
from scipy.linalg.cython_blas cimport dgemv


def linear_recurrence(const double[:, ::1] P, const double[:, ::1] W, const double[::1] x0):
    cdef int n = P.shape[0]
    cdef Py_ssize_t N = W.shape[0]
    if P.shape[1] != n or W.shape[1] != n or x0.shape[0] != n:
        raise ValueError("shape mismatch in linear_recurrence")
    out = np.empty((N + 1, n))
    cdef double[:, ::1] X = out
    cdef Py_ssize_t k
    cdef int i
    cdef char trans = b'T'
    cdef int inc = 1
    cdef double one = 1.0
    for i in range(n):
        X[0, i] = x0[i]
    if n == 0:
        return out
    for k in range(N):
        for i in range(n):
            X[k + 1, i] = W[k, i]
        # row-major P is P^T in column-major storage
        dgemv(&trans, &n, &n, &one, <double*> &P[0, 0], &n, &X[k, 0], &inc, &one, &X[k + 1, 0], &inc)
    return out


def _rk4_maps(A, B, E, double h):
    """One RK4 step of x' = A x + B u + E as x+ = P x + G0 u0 + G1 u1/2 + G2 u1 + r.

    Exact algebraic expansion of the four stages for time-invariant A, B, E.
    """
    S, n = A.shape[0], A.shape[1]
    I = np.broadcast_to(np.eye(n), A.shape)
    hA = h * np.asarray(A)
    hA2 = hA @ hA
    hA3 = hA2 @ hA
    P = I + hA + hA2 / 2.0 + hA3 / 6.0 + hA3 @ hA / 24.0
    M0 = h / 6.0 * (I + hA + hA2 / 2.0 + hA3 / 4.0)
    M1 = h / 6.0 * (4.0 * I + 2.0 * hA + hA2 / 2.0)
    M2 = h / 6.0 * I
    B = np.asarray(B)
    G = np.stack([M0 @ B, M1 @ B, M2 @ B], axis=1)  # (S, 3, n, l)
    r = np.einsum("sij,sj->si", M0 + M1 + M2, np.asarray(E))
    return (np.ascontiguousarray(P), np.ascontiguousarray(G), np.ascontiguousarray(r))


def lti_rk4_batch(const double[:, :, ::1] A, const double[:, :, ::1] B, const double[:, ::1] E,
                  const double[:, ::1] X0, const double[:, ::1] U, double h, int every):
    cdef Py_ssize_t S = A.shape[0]
    cdef int n = A.shape[1]
    cdef int l = B.shape[2]
    cdef Py_ssize_t N = (U.shape[0] - 1) // 2
    cdef Py_ssize_t K = N // every + 1
    out = np.empty((S, K, n))
    cdef double[:, :, ::1] X = out
    if n == 0 or S == 0:
        return out
    if U.shape[1] != l or E.shape[1] != n or X0.shape[1] != n:
        raise ValueError("shape mismatch in lti_rk4_batch")
    P_arr, G_arr, r_arr = _rk4_maps(np.asarray(A), np.asarray(B), np.asarray(E), h)
    cdef double[:, :, ::1] P = P_arr
    cdef double[:, :, :, ::1] G = G_arr
    cdef double[:, ::1] r = r_arr
    state = np.array(X0, dtype=float, order="C")
    cdef double[:, ::1] xs = state
    scratch = np.empty((S, n))
    cdef double[:, ::1] xn = scratch
    cdef Py_ssize_t s, k
    cdef int i, j
    cdef double acc
    cdef const double* u0
    cdef const double* u1
    cdef const double* u2
    with nogil:
        for s in range(S):
            for i in range(n):
                X[s, 0, i] = xs[s, i]
        # time outer, samples inner: consecutive samples are independent,
        # so their arithmetic overlaps instead of waiting on one long chain
        for k in range(N):
            u0 = &U[2 * k, 0]
            u1 = &U[2 * k + 1, 0]
            u2 = &U[2 * k + 2, 0]
            if n == 1 and l == 1:
                for s in range(S):
                    xs[s, 0] = (P[s, 0, 0] * xs[s, 0] + G[s, 0, 0, 0] * u0[0] + G[s, 1, 0, 0] * u1[0]
                                + G[s, 2, 0, 0] * u2[0] + r[s, 0])
            else:
                for s in range(S):
                    for i in range(n):
                        acc = r[s, i]
                        for j in range(n):
                            acc = acc + P[s, i, j] * xs[s, j]
                        for j in range(l):
                            acc = acc + G[s, 0, i, j] * u0[j] + G[s, 1, i, j] * u1[j] + G[s, 2, i, j] * u2[j]
                        xn[s, i] = acc
                    for i in range(n):
                        xs[s, i] = xn[s, i]
            if (k + 1) % every == 0:
                for s in range(S):
                    for i in range(n):
                        X[s, (k + 1) // every, i] = xs[s, i]
    return out


cdef inline void _st_rhs(double* x, double u, double Jz, double Bf, double Br,
                         double ws, double ds, const double* c, double* dx) noexcept nogil:
    # c = [m, lf, lr, kf, kr, Tf, Tr]; kf, kr are the force scales mu*C*m*g*l/(lf+lr)
    cdef double psi_d = x[0], beta = x[1], v = x[2], Ff = x[3], Fr = x[4]
    cdef double delta = x[5], ddelta = x[6]
    cdef double m = c[0], lf = c[1], lr = c[2]
    cdef double vx = v * cos(beta)
    cdef double vy = v * sin(beta)
    cdef double alpha_f = delta - atan((lf * psi_d + vy) / vx)
    cdef double alpha_r = -atan((vy - lr * psi_d) / vx)
    cdef double cd = cos(delta)
    dx[0] = (lf * Ff * cd - lr * Fr) / Jz
    dx[1] = (Ff * cd + Fr) / (m * v) - psi_d
    dx[2] = (-Ff * sin(delta - beta) + Fr * sin(beta)) / m
    dx[3] = (c[3] * atan(Bf * alpha_f) - Ff) / c[5]
    dx[4] = (c[4] * atan(Br * alpha_r) - Fr) / c[6]
    dx[5] = ddelta
    dx[6] = ws * ws * (u - delta) - 2.0 * ds * ws * ddelta


def single_track_batch(const double[:, ::1] theta, const double[::1] consts, double v0,
                       const double[::1] U, double h, int every, double v_min):
    """Yaw rate of the nonlinear single-track model for each parameter row.

    Returns (yaw_rate (S, K), status (S,), fail_step (S,)); status 0 = ok,
    1 = speed guard, 2 = non-finite state.
    """
    cdef Py_ssize_t S = theta.shape[0]
    cdef Py_ssize_t N = (U.shape[0] - 1) // 2
    cdef Py_ssize_t K = N // every + 1
    out = np.empty((S, K))
    status_arr = np.zeros(S, dtype=np.int64)
    fail_arr = np.full(S, -1, dtype=np.int64)
    cdef double[:, ::1] Y = out
    cdef long long[::1] status = status_arr
    cdef long long[::1] fail = fail_arr
    work = np.zeros((6, 7))
    cdef double[:, ::1] wk = work
    cdef double* x = &wk[0, 0]
    cdef double* k1 = &wk[1, 0]
    cdef double* k2 = &wk[2, 0]
    cdef double* k3 = &wk[3, 0]
    cdef double* k4 = &wk[4, 0]
    cdef double* tmp = &wk[5, 0]
    cdef Py_ssize_t s, k, kk
    cdef int i
    cdef bint bad
    cdef double Jz, Bf, Br, ws, ds
    cdef double h2 = 0.5 * h, h6 = h / 6.0
    cdef const double* pc = &consts[0]
    with nogil:
        for s in range(S):
            Jz = theta[s, 0]; Bf = theta[s, 1]; Br = theta[s, 2]; ws = theta[s, 3]; ds = theta[s, 4]
            for i in range(7):
                x[i] = 0.0
            x[2] = v0
            Y[s, 0] = 0.0
            for k in range(N):
                _st_rhs(x, U[2 * k], Jz, Bf, Br, ws, ds, pc, k1)
                for i in range(7):
                    tmp[i] = x[i] + h2 * k1[i]
                _st_rhs(tmp, U[2 * k + 1], Jz, Bf, Br, ws, ds, pc, k2)
                for i in range(7):
                    tmp[i] = x[i] + h2 * k2[i]
                _st_rhs(tmp, U[2 * k + 1], Jz, Bf, Br, ws, ds, pc, k3)
                for i in range(7):
                    tmp[i] = x[i] + h * k3[i]
                _st_rhs(tmp, U[2 * k + 2], Jz, Bf, Br, ws, ds, pc, k4)
                bad = False
                for i in range(7):
                    x[i] = x[i] + h6 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                    if not isfinite(x[i]):
                        bad = True
                if bad or x[2] <= v_min:
                    status[s] = 2 if bad else 1
                    fail[s] = k + 1
                    for kk in range((k + 1 + every - 1) // every, K):
                        Y[s, kk] = NAN
                    break
                if (k + 1) % every == 0:
                    Y[s, (k + 1) // every] = x[0]
    return out, status_arr, fail_arr
