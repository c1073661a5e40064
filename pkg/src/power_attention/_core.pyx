# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled expand-and-contract kernels.

Monomial-table rows are expanded on the fly inside the contraction loops,
so the [c, D] expanded chunk never exists in memory. update_state is
token-blocked (block size 64, fixed, not auto-tuned) so the key/value
block stays cache-resident while the state streams through.

Outputs are accumulated in place; callers pass zeroed arrays. See
power_attention.kernels for dispatch and the numpy equivalent.
"""

ctypedef fused real:
    float
    double


def update_state(real[:, :, ::1] k, real[:, :, ::1] v, real[:, ::1] w,
                 const int[:, ::1] idx, real[::1] weights,
                 real[:, :, ::1] state, real[:, ::1] key_sum):
    """state[s] += sum_j w[s,j] phi(k[s,j]) (x) v[s,j]; key_sum likewise."""
    cdef Py_ssize_t n = k.shape[0], c = k.shape[1]
    cdef Py_ssize_t dim = idx.shape[0], p = idx.shape[1], vdim = v.shape[2]
    cdef Py_ssize_t s, r, j, u, z, j0, j1
    cdef real f, acc
    for s in range(n):
        j0 = 0
        while j0 < c:
            j1 = j0 + 64  # token block
            if j1 > c:
                j1 = c
            for r in range(dim):
                acc = 0
                for j in range(j0, j1):
                    f = weights[r]
                    for z in range(p):
                        f = f * k[s, j, idx[r, z]]
                    f = f * w[s, j]
                    acc = acc + f
                    for u in range(vdim):
                        state[s, r, u] += f * v[s, j, u]
                key_sum[s, r] += acc
            j0 = j1


def query_state(real[:, :, ::1] q, real[:, :, ::1] state, real[:, ::1] key_sum,
                const int[:, ::1] idx, real[::1] weights,
                real[:, :, ::1] y, real[:, ::1] denom):
    """y[s,m] += phi(q[s,m]) . state[s]; denom[s,m] += phi(q[s,m]) . key_sum[s]."""
    cdef Py_ssize_t n = q.shape[0], c = q.shape[1]
    cdef Py_ssize_t dim = idx.shape[0], p = idx.shape[1], vdim = state.shape[2]
    cdef Py_ssize_t s, m, r, u, z
    cdef real f, acc
    for s in range(n):
        for m in range(c):
            acc = 0
            for r in range(dim):
                f = weights[r]
                for z in range(p):
                    f = f * q[s, m, idx[r, z]]
                acc = acc + f * key_sum[s, r]
                for u in range(vdim):
                    y[s, m, u] += f * state[s, r, u]
            denom[s, m] += acc
