"""Compiled GRU backward recurrence.

Same math and memory layout as the numpy loop in ``encoders``; the time loop
and the gate arithmetic are fused so each step is one small BLAS call plus a
tight elementwise loop.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def gru_backward_kernel(g_out, W_hh_T, reverse, gates, cand, hn, h_prev_all, dxp, dhp):
    B, L, H = g_out.shape
    dh_next = np.zeros((B, H))
    dhp_t = np.empty((B, 3 * H))
    for s in range(L):
        t = s if reverse else L - 1 - s
        for i in range(B):
            for j in range(H):
                dh = g_out[i, t, j] + dh_next[i, j]
                r = gates[i, t, j]
                u = gates[i, t, H + j]
                n = cand[i, t, j]
                du = dh * (h_prev_all[i, t, j] - n)
                dn_pre = dh * (1.0 - u) * (1.0 - n * n)
                dr_pre = dn_pre * hn[i, t, j] * r * (1.0 - r)
                du_pre = du * u * (1.0 - u)
                dxp[i, t, j] = dr_pre
                dxp[i, t, H + j] = du_pre
                dxp[i, t, 2 * H + j] = dn_pre
                dhp_t[i, j] = dr_pre
                dhp_t[i, H + j] = du_pre
                dhp_t[i, 2 * H + j] = dn_pre * r
                dh_next[i, j] = dh * u
        dh_next += np.dot(dhp_t, W_hh_T)
        for i in range(B):
            for k in range(3 * H):
                dhp[i, t, k] = dhp_t[i, k]
