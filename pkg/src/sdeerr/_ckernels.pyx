# cython: language_level=3
"""Compiled path kernels.

Mirrors ``sdeerr._pykernels`` exactly in the random stream it consumes: every
standard normal is a pure function of ``(stream key, path index, step index)``,
so batches can run in any order on any number of threads.
"""
import numpy as np

from libc.math cimport cos, log, sin, sqrt, tanh
from libc.stdint cimport int64_t, uint64_t

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0

# model ids, kept in sync with sdeerr._pykernels.MODEL_IDS
cdef enum:
    GBM = 0
    ADDITIVE = 1
    BOUNDED_TANH = 2

# scheme ids
cdef enum:
    EULER = 0
    MILSTEIN = 1


cdef inline uint64_t mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double to_unit(uint64_t u) noexcept nogil:
    return (<double>(u >> 11) + 0.5) * INV_2_53


cdef inline uint64_t path_key(uint64_t stream_key, int64_t path) noexcept nogil:
    return mix64(stream_key + <uint64_t>(path + 1) * GOLDEN)


cdef inline void normal_pair(uint64_t key, int64_t pair, double* z0, double* z1) noexcept nogil:
    cdef uint64_t ua = mix64(key + <uint64_t>(2 * pair + 1) * GOLDEN)
    cdef uint64_t ub = mix64(key + <uint64_t>(2 * pair + 2) * GOLDEN)
    cdef double r = sqrt(-2.0 * log(to_unit(ua)))
    cdef double ang = TWO_PI * to_unit(ub)
    z0[0] = r * cos(ang)
    z1[0] = r * sin(ang)


def mix(uint64_t z):
    return mix64(z)


def normals_block(uint64_t stream_key, int64_t path_start, int64_t step_start,
                  double[:, ::1] out):
    """Fill ``out[i, j]`` with the normal for path ``path_start+i``, step ``step_start+j``."""
    cdef Py_ssize_t n_paths = out.shape[0]
    cdef Py_ssize_t m = out.shape[1]
    cdef Py_ssize_t i, j
    cdef int64_t step
    cdef uint64_t key
    cdef double z0, z1
    if step_start % 2 != 0:
        raise ValueError("step_start must be even")
    with nogil:
        for i in range(n_paths):
            key = path_key(stream_key, path_start + i)
            j = 0
            while j < m:
                step = step_start + j
                normal_pair(key, step // 2, &z0, &z1)
                out[i, j] = z0
                if j + 1 < m:
                    out[i, j + 1] = z1
                j += 2


cdef inline void coefficients(int model, double* prm, double x,
                              double* sig, double* drift, double* sdx) noexcept nogil:
    cdef double th
    if model == GBM:
        drift[0] = prm[0] * x
        sig[0] = prm[1] * x
        sdx[0] = prm[1]
    elif model == ADDITIVE:
        drift[0] = prm[0]
        sig[0] = prm[1]
        sdx[0] = 0.0
    else:
        th = tanh(x)
        drift[0] = prm[0] * th
        sig[0] = prm[1] + prm[2] * th
        sdx[0] = prm[2] * (1.0 - th * th)


def terminal_values(int model, const double[::1] params, double x0, const double[::1] nodes,
                    int scheme, uint64_t stream_key, int64_t path_start,
                    double[::1] out_x, double[::1] out_w, int stride=1):
    """Run Euler or Milstein to the last node for ``len(out_x)`` paths.

    Brownian increments live on ``nodes``; the scheme steps over every
    ``stride``-th node and sums the increments in between.
    """
    cdef Py_ssize_t n_fine = nodes.shape[0] - 1
    cdef Py_ssize_t n_paths = out_x.shape[0]
    cdef Py_ssize_t n_coarse, i, c, s, idx
    cdef double[::1] sq = np.empty(max(n_fine, 1))
    cdef double[::1] prm = np.zeros(4)
    cdef double x, w, dw, dt, sig, drift, sdx, z0, z1
    cdef uint64_t key
    cdef double* pp
    if stride < 1 or n_fine % stride != 0:
        raise ValueError("stride must divide the number of driver steps")
    if out_w.shape[0] != n_paths:
        raise ValueError("output arrays differ in length")
    if model not in (GBM, ADDITIVE, BOUNDED_TANH):
        raise ValueError("unknown model id %d" % model)
    n_coarse = n_fine // stride
    for i in range(min(params.shape[0], 4)):
        prm[i] = params[i]
    for i in range(n_fine):
        sq[i] = sqrt(nodes[i + 1] - nodes[i])
    pp = &prm[0]
    with nogil:
        for i in range(n_paths):
            key = path_key(stream_key, path_start + i)
            x = x0
            w = 0.0
            z1 = 0.0
            for c in range(n_coarse):
                dw = 0.0
                for s in range(stride):
                    idx = c * stride + s
                    if idx % 2 == 0:
                        normal_pair(key, idx // 2, &z0, &z1)
                        dw = dw + sq[idx] * z0
                    else:
                        dw = dw + sq[idx] * z1
                dt = nodes[(c + 1) * stride] - nodes[c * stride]
                coefficients(model, pp, x, &sig, &drift, &sdx)
                if scheme == MILSTEIN:
                    x = x + drift * dt + sig * dw + 0.5 * sig * sdx * (dw * dw - dt)
                else:
                    x = x + drift * dt + sig * dw
                w = w + dw
            out_x[i] = x
            out_w[i] = w
