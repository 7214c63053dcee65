"""Compiled direct-convolution kernels for the 3x3x3 case.

One thread owns each (batch, out-channel) pair and accumulates taps in a
fixed sweep order, so results are bit-reproducible regardless of thread
count. fastmath stays off to keep IEEE ordering.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=False, cache=True)
def conv3_forward(xp, w, out):
    """out[n,o] += 3x3x3 correlation of padded xp[n,:] with w[o].

    xp is the zero-padded input (N, C, X+2, Y+2, Z+2); out is
    pre-zeroed (N, O, X, Y, Z).
    """
    N, O, X, Y, Z = out.shape
    C = w.shape[1]
    for no in prange(N * O):
        n = no // O
        o = no % O
        for c in range(C):
            for i in range(3):
                for j in range(3):
                    w0 = w[o, c, i, j, 0]
                    w1 = w[o, c, i, j, 1]
                    w2 = w[o, c, i, j, 2]
                    for x in range(X):
                        for y in range(Y):
                            src = xp[n, c, x + i, y + j]
                            dst = out[n, o, x, y]
                            for z in range(Z):
                                dst[z] += w0 * src[z] + w1 * src[z + 1] + w2 * src[z + 2]


@njit(parallel=True, fastmath=False, cache=True)
def conv3_weight_grad(xp, gout, dw):
    """dw[o,c,i,j,k] = sum_n,xyz gout[n,o,xyz] * xp[n,c,x+i,y+j,z+k].

    One thread owns each (o, c) pair and sweeps the data once; z-taps
    accumulate into per-tap lanes so the loop vectorizes without
    reassociating the final sums.
    """
    N, O, X, Y, Z = gout.shape
    C = dw.shape[1]
    for oc in prange(O * C):
        o = oc // C
        c = oc % C
        acc = np.zeros((3, 3, 3, Z), dtype=dw.dtype)
        for n in range(N):
            for x in range(X):
                for y in range(Y):
                    g = gout[n, o, x, y]
                    for i in range(3):
                        for j in range(3):
                            src = xp[n, c, x + i, y + j]
                            a = acc[i, j]
                            for z in range(Z):
                                gz = g[z]
                                a[0, z] += gz * src[z]
                                a[1, z] += gz * src[z + 1]
                                a[2, z] += gz * src[z + 2]
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    s = 0.0
                    for z in range(Z):
                        s += acc[i, j, k, z]
                    dw[o, c, i, j, k] = s
