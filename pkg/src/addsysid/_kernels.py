import numpy as np
from numba import njit


@njit(cache=True)
def lsim_kernel(Ad, Bd, C, D, U):
    # x[k+1] = Ad x[k] + Bd u[k],  y[k] = C x[k] + D u[k],  x[0] = 0
    N, m = U.shape
    n = Ad.shape[0]
    p = C.shape[0]
    Y = np.empty((N, p))
    x = np.zeros(n)
    xn = np.zeros(n)
    for k in range(N):
        for i in range(p):
            acc = 0.0
            for j in range(n):
                acc += C[i, j] * x[j]
            for j in range(m):
                acc += D[i, j] * U[k, j]
            Y[k, i] = acc
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += Ad[i, j] * x[j]
            for j in range(m):
                acc += Bd[i, j] * U[k, j]
            xn[i] = acc
        for i in range(n):
            x[i] = xn[i]
    return Y


@njit(cache=True)
def siso_bank_kernel(Ad, bd, C, d, X):
    # Runs one single-input, multi-output system over every column of X
    # independently. Returns shape (N, channels, outputs).
    N, nch = X.shape
    n = Ad.shape[0]
    p = C.shape[0]
    Y = np.empty((N, nch, p))
    x = np.zeros(n)
    xn = np.zeros(n)
    for c in range(nch):
        for i in range(n):
            x[i] = 0.0
        for k in range(N):
            uk = X[k, c]
            for i in range(p):
                acc = d[i] * uk
                for j in range(n):
                    acc += C[i, j] * x[j]
                Y[k, c, i] = acc
            for i in range(n):
                acc = bd[i] * uk
                for j in range(n):
                    acc += Ad[i, j] * x[j]
                xn[i] = acc
            for i in range(n):
                x[i] = xn[i]
    return Y
