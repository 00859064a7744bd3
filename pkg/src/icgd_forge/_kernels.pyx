# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled multi-head score/value accumulation.

Inputs are the packed projections produced by ``kernels.pack_heads``:

    q[i, r]   query coordinate r of token i   (all heads' score rows side by side)
    k[s, r]   key coordinate r of token s
    v[s, u]   value coordinate u of token s   (all heads' value rows side by side)

Head m owns score rows hptr[m]:hptr[m+1] and value rows vptr[m]:vptr[m+1];
value row u is written to embedding row vtarget[u].
"""

from libc.math cimport exp

cdef inline double _act(double x, int code) noexcept nogil:
    cdef double e
    if code == 0:
        return x if x > 0.0 else 0.0
    elif code == 1:
        return x
    elif code == 2:
        if x >= 0.0:
            return 1.0 / (1.0 + exp(-x))
        e = exp(x)
        return e / (1.0 + e)
    else:
        if x >= 0.0:
            e = exp(-x)
        else:
            e = exp(x)
        return e / ((1.0 + e) * (1.0 + e))


def apply_heads(const double[:, ::1] q, const double[:, ::1] k,
                const long long[::1] hptr,
                const double[:, ::1] v, const long long[::1] vptr,
                const long long[::1] vtarget,
                int act, bint diag, double scale, double[:, ::1] out):
    """Accumulate scale * sum_m sum_s act(<q_m(i), k_m(s)>) v_m(s) into out[i, :]."""
    cdef Py_ssize_t M = hptr.shape[0] - 1
    cdef Py_ssize_t T = q.shape[0]
    cdef Py_ssize_t m, i, s, r, u, s_lo, s_hi
    cdef double score, a
    with nogil:
        for m in range(M):
            if vptr[m] == vptr[m + 1]:
                continue
            for i in range(T):
                if diag:
                    s_lo = i
                    s_hi = i + 1
                else:
                    s_lo = 0
                    s_hi = T
                for s in range(s_lo, s_hi):
                    score = 0.0
                    for r in range(hptr[m], hptr[m + 1]):
                        score = score + q[i, r] * k[s, r]
                    a = _act(score, act)
                    if a == 0.0:
                        continue
                    a = a * scale
                    for u in range(vptr[m], vptr[m + 1]):
                        out[i, vtarget[u]] += a * v[s, u]
