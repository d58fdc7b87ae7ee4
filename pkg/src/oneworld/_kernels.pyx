# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Philox4x32-10 normals, periodic cubic interpolation
and the Euler-Maruyama ensemble step. API mirrors ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, cos, sin, floor, M_PI
from libc.stdint cimport uint32_t, uint64_t, int64_t

cnp.import_array()

cdef uint64_t M0 = 0xD2511F53
cdef uint64_t M1 = 0xCD9E8D57
cdef uint32_t W0 = 0x9E3779B9
cdef uint32_t W1 = 0xBB67AE85
cdef uint64_t LO32 = 0xFFFFFFFF


cdef inline void _philox(uint32_t* c, uint32_t k0, uint32_t k1) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t a0, a1, a2, a3
    cdef int r
    for r in range(10):
        if r:
            k0 = k0 + W0
            k1 = k1 + W1
        p0 = M0 * <uint64_t>c[0]
        p1 = M1 * <uint64_t>c[2]
        a0 = <uint32_t>(p1 >> 32) ^ c[1] ^ k0
        a1 = <uint32_t>p1
        a2 = <uint32_t>(p0 >> 32) ^ c[3] ^ k1
        a3 = <uint32_t>p0
        c[0] = a0
        c[1] = a1
        c[2] = a2
        c[3] = a3


def philox4x32(ctr, key):
    cdef cnp.uint32_t[:, ::1] c = np.ascontiguousarray(ctr, dtype=np.uint32).copy()
    cdef uint32_t k0 = <uint32_t>(int(key[0]) & 0xFFFFFFFF)
    cdef uint32_t k1 = <uint32_t>(int(key[1]) & 0xFFFFFFFF)
    cdef Py_ssize_t i, n = c.shape[0]
    with nogil:
        for i in range(n):
            _philox(&c[i, 0], k0, k1)
    return np.asarray(c)


cdef inline void _uniforms(uint64_t seed, uint32_t step, uint32_t purpose,
                           uint64_t stream, double* u) noexcept nogil:
    cdef uint32_t c[4]
    cdef uint64_t a, b
    c[0] = step
    c[1] = purpose
    c[2] = <uint32_t>(stream & LO32)
    c[3] = <uint32_t>(stream >> 32)
    _philox(c, <uint32_t>(seed & LO32), <uint32_t>(seed >> 32))
    a = ((<uint64_t>(c[0] >> 5)) << 26) | (<uint64_t>(c[1] >> 6))
    b = ((<uint64_t>(c[2] >> 5)) << 26) | (<uint64_t>(c[3] >> 6))
    u[0] = <double>a * (1.0 / 9007199254740992.0)
    u[1] = <double>b * (1.0 / 9007199254740992.0)


def uniform_pairs(seed, step, purpose, streams):
    cdef cnp.uint64_t[::1] s = np.ascontiguousarray(streams, dtype=np.uint64)
    cdef Py_ssize_t i, n = s.shape[0]
    out = np.empty((n, 2))
    cdef double[:, ::1] o = out
    cdef uint64_t sd = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint32_t st = <uint32_t>(int(step) & 0xFFFFFFFF)
    cdef uint32_t pp = <uint32_t>(int(purpose) & 0xFFFFFFFF)
    with nogil:
        for i in range(n):
            _uniforms(sd, st, pp, s[i], &o[i, 0])
    return out


def normal_pairs(seed, step, purpose, streams):
    cdef cnp.uint64_t[::1] s = np.ascontiguousarray(streams, dtype=np.uint64)
    cdef Py_ssize_t i, n = s.shape[0]
    out = np.empty((n, 2))
    cdef double[:, ::1] o = out
    cdef double u[2]
    cdef double r, th
    cdef uint64_t sd = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint32_t st = <uint32_t>(int(step) & 0xFFFFFFFF)
    cdef uint32_t pp = <uint32_t>(int(purpose) & 0xFFFFFFFF)
    with nogil:
        for i in range(n):
            _uniforms(sd, st, pp, s[i], u)
            r = sqrt(-2.0 * log(1.0 - u[0]))
            th = 2.0 * M_PI * u[1]
            o[i, 0] = r * cos(th)
            o[i, 1] = r * sin(th)
    return out


cdef inline void _weights(double t, double* w) noexcept nogil:
    cdef double t2 = t * t
    cdef double t3 = t2 * t
    w[0] = -0.5 * t3 + t2 - 0.5 * t
    w[1] = 1.5 * t3 - 2.5 * t2 + 1.0
    w[2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t
    w[3] = 0.5 * t3 - 0.5 * t2


cdef inline Py_ssize_t _wrap(int64_t i, Py_ssize_t n) noexcept nogil:
    cdef int64_t r = i % n
    if r < 0:
        r += n
    return <Py_ssize_t>r


cdef int _interp1(const double[:, ::1] f, const cnp.uint8_t[::1] mask,
                  double x0, double h, double x, double* out) noexcept nogil:
    cdef Py_ssize_t nc = f.shape[0], n = f.shape[1]
    cdef double s = (x - x0) / h
    cdef double fl = floor(s)
    cdef double w[4]
    cdef Py_ssize_t idx[4]
    cdef int k, c
    cdef double acc
    _weights(s - fl, w)
    for k in range(4):
        idx[k] = _wrap(<int64_t>fl - 1 + k, n)
        if mask[idx[k]]:
            for c in range(nc):
                out[c] = 0.0
            return 1
    for c in range(nc):
        acc = 0.0
        for k in range(4):
            acc = acc + f[c, idx[k]] * w[k]
        out[c] = acc
    return 0


cdef int _interp2(const double[:, :, ::1] f, const cnp.uint8_t[:, ::1] mask,
                  double x0, double y0, double hx, double hy,
                  double x, double y, double* out) noexcept nogil:
    cdef Py_ssize_t nc = f.shape[0], nx = f.shape[1], ny = f.shape[2]
    cdef double sx = (x - x0) / hx
    cdef double sy = (y - y0) / hy
    cdef double fx = floor(sx)
    cdef double fy = floor(sy)
    cdef double wx[4]
    cdef double wy[4]
    cdef Py_ssize_t ix[4]
    cdef Py_ssize_t iy[4]
    cdef int a, b, c
    cdef double acc
    _weights(sx - fx, wx)
    _weights(sy - fy, wy)
    for a in range(4):
        ix[a] = _wrap(<int64_t>fx - 1 + a, nx)
        iy[a] = _wrap(<int64_t>fy - 1 + a, ny)
    for a in range(4):
        for b in range(4):
            if mask[ix[a], iy[b]]:
                for c in range(nc):
                    out[c] = 0.0
                return 1
    for c in range(nc):
        acc = 0.0
        for a in range(4):
            for b in range(4):
                acc = acc + f[c, ix[a], iy[b]] * (wx[a] * wy[b])
        out[c] = acc
    return 0


def interp_periodic(fields, mask, origin, spacing, x):
    fields = np.ascontiguousarray(fields, dtype=np.float64)
    dims = fields.ndim - 1
    xa = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, dims))
    cdef Py_ssize_t i, n = xa.shape[0]
    cdef Py_ssize_t nc = fields.shape[0]
    out = np.zeros((n, nc))
    flags = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] o = out
    cdef cnp.uint8_t[::1] fl = flags
    cdef double[:, ::1] xv = xa
    cdef double[:, ::1] f1
    cdef double[:, :, ::1] f2
    cdef cnp.uint8_t[::1] m1
    cdef cnp.uint8_t[:, ::1] m2
    cdef double ox = origin[0], hx = spacing[0], oy = 0.0, hy = 1.0
    if dims == 1:
        f1 = fields
        m1 = np.ascontiguousarray(mask, dtype=np.uint8)
        with nogil:
            for i in range(n):
                fl[i] = _interp1(f1, m1, ox, hx, xv[i, 0], &o[i, 0])
    else:
        f2 = fields
        m2 = np.ascontiguousarray(mask, dtype=np.uint8)
        oy = origin[1]
        hy = spacing[1]
        with nogil:
            for i in range(n):
                fl[i] = _interp2(f2, m2, ox, oy, hx, hy, xv[i, 0], xv[i, 1], &o[i, 0])
    return out, flags


def em_step(x, alive, fa, fb, mask_a, mask_b, double wb, origin, spacing,
            double dt, double noise, z):
    cdef double[:, ::1] xv = x
    cdef cnp.uint8_t[::1] al = np.ascontiguousarray(alive, dtype=np.uint8)
    cdef double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef int dims = xv.shape[1]
    cdef int c, fa_bad, fb_bad
    flags = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] fl = flags
    cdef double va[2]
    cdef double vb[2]
    cdef double ox = origin[0], hx = spacing[0], oy = 0.0, hy = 1.0
    cdef double[:, ::1] a1
    cdef double[:, ::1] b1
    cdef double[:, :, ::1] a2
    cdef double[:, :, ::1] b2
    cdef cnp.uint8_t[::1] ma1
    cdef cnp.uint8_t[::1] mb1
    cdef cnp.uint8_t[:, ::1] ma2
    cdef cnp.uint8_t[:, ::1] mb2
    if dims == 1:
        a1 = np.ascontiguousarray(fa, dtype=np.float64)
        b1 = np.ascontiguousarray(fb, dtype=np.float64)
        ma1 = np.ascontiguousarray(mask_a, dtype=np.uint8)
        mb1 = np.ascontiguousarray(mask_b, dtype=np.uint8)
    else:
        a2 = np.ascontiguousarray(fa, dtype=np.float64)
        b2 = np.ascontiguousarray(fb, dtype=np.float64)
        ma2 = np.ascontiguousarray(mask_a, dtype=np.uint8)
        mb2 = np.ascontiguousarray(mask_b, dtype=np.uint8)
        oy = origin[1]
        hy = spacing[1]
    with nogil:
        for i in range(n):
            if not al[i]:
                continue
            fb_bad = 0
            if dims == 1:
                fa_bad = _interp1(a1, ma1, ox, hx, xv[i, 0], va)
                if wb != 0.0:
                    fb_bad = _interp1(b1, mb1, ox, hx, xv[i, 0], vb)
            else:
                fa_bad = _interp2(a2, ma2, ox, oy, hx, hy, xv[i, 0], xv[i, 1], va)
                if wb != 0.0:
                    fb_bad = _interp2(b2, mb2, ox, oy, hx, hy, xv[i, 0], xv[i, 1], vb)
            if fa_bad or fb_bad:
                fl[i] = 1
                for c in range(dims):
                    xv[i, c] = xv[i, c] + noise * zv[i, c]
            else:
                for c in range(dims):
                    if wb != 0.0:
                        va[c] = (1.0 - wb) * va[c] + wb * vb[c]
                    xv[i, c] = xv[i, c] + va[c] * dt + noise * zv[i, c]
    return flags
