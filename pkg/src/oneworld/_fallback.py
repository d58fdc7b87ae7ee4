"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` one to one. The compiled module is preferred at
import time; this one is used when it is missing or when
``ONEWORLD_BACKEND=python`` is set.
"""
from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)


def philox4x32(ctr: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Philox4x32-10 block function.

    ``ctr`` has shape (n, 4) of uint32 words; returns the (n, 4) output block.
    """
    c = np.asarray(ctr, dtype=np.uint32).astype(np.uint64)
    c0, c1, c2, c3 = (c[:, i].copy() for i in range(4))
    k0 = int(key[0]) & 0xFFFFFFFF
    k1 = int(key[1]) & 0xFFFFFFFF
    for r in range(10):
        if r:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = c0 * _M0
        p1 = c2 * _M1
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
    return np.stack([c0, c1, c2, c3], axis=1).astype(np.uint32)


def _counters(step: int, purpose: int, streams: np.ndarray) -> np.ndarray:
    s = np.asarray(streams, dtype=np.uint64)
    ctr = np.empty((s.size, 4), dtype=np.uint32)
    ctr[:, 0] = np.uint32(step & 0xFFFFFFFF)
    ctr[:, 1] = np.uint32(purpose & 0xFFFFFFFF)
    ctr[:, 2] = (s & _MASK32).astype(np.uint32)
    ctr[:, 3] = (s >> _SHIFT32).astype(np.uint32)
    return ctr


def uniform_pairs(seed: int, step: int, purpose: int, streams: np.ndarray) -> np.ndarray:
    """Two 53-bit uniforms in [0, 1) per stream for the counter (step, purpose, stream)."""
    key = (seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF)
    x = philox4x32(_counters(step, purpose, streams), key).astype(np.uint64)
    a = ((x[:, 0] >> np.uint64(5)) << np.uint64(26)) | (x[:, 1] >> np.uint64(6))
    b = ((x[:, 2] >> np.uint64(5)) << np.uint64(26)) | (x[:, 3] >> np.uint64(6))
    scale = 1.0 / 9007199254740992.0
    return np.stack([a.astype(np.float64) * scale, b.astype(np.float64) * scale], axis=1)


def normal_pairs(seed: int, step: int, purpose: int, streams: np.ndarray) -> np.ndarray:
    """Two standard normals per stream (Box-Muller on one Philox block)."""
    u = uniform_pairs(seed, step, purpose, streams)
    r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
    th = 2.0 * np.pi * u[:, 1]
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


def _keys_weights(t: np.ndarray) -> np.ndarray:
    # Keys cubic convolution, a = -1/2, for offsets -1, 0, 1, 2.
    t2 = t * t
    t3 = t2 * t
    w0 = -0.5 * t3 + t2 - 0.5 * t
    w1 = 1.5 * t3 - 2.5 * t2 + 1.0
    w2 = -1.5 * t3 + 2.0 * t2 + 0.5 * t
    w3 = 0.5 * t3 - 0.5 * t2
    return np.stack([w0, w1, w2, w3], axis=-1)


def interp_periodic(fields: np.ndarray, mask: np.ndarray, origin: np.ndarray,
                    spacing: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cubic interpolation on a periodic grid.

    fields: (ncomp, *shape) values; mask: shape of the grid, nonzero where the
    value is unusable; x: (n, dims) positions. Returns (n, ncomp) values and an
    (n,) uint8 flag, 1 where any stencil node is masked (the value is then 0).
    """
    fields = np.asarray(fields, dtype=np.float64)
    shape = fields.shape[1:]
    dims = len(shape)
    x = np.asarray(x, dtype=np.float64).reshape(-1, dims)
    n = x.shape[0]
    ncomp = fields.shape[0]
    idx = []
    wts = []
    for a in range(dims):
        s = (x[:, a] - origin[a]) / spacing[a]
        i0 = np.floor(s)
        t = s - i0
        base = i0.astype(np.int64) - 1
        idx.append(np.mod(base[:, None] + np.arange(4)[None, :], shape[a]))
        wts.append(_keys_weights(t))
    out = np.zeros((n, ncomp))
    bad = np.zeros(n, dtype=bool)
    if dims == 1:
        ii = idx[0]
        bad = np.any(mask[ii] != 0, axis=1)
        for c in range(ncomp):
            out[:, c] = np.sum(fields[c][ii] * wts[0], axis=1)
    else:
        ii = idx[0][:, :, None]
        jj = idx[1][:, None, :]
        w2 = wts[0][:, :, None] * wts[1][:, None, :]
        bad = np.any(mask[ii, jj] != 0, axis=(1, 2))
        for c in range(ncomp):
            out[:, c] = np.sum(fields[c][ii, jj] * w2, axis=(1, 2))
    out[bad] = 0.0
    return out, bad.astype(np.uint8)


def em_step(x: np.ndarray, alive: np.ndarray, fa: np.ndarray, fb: np.ndarray,
            mask_a: np.ndarray, mask_b: np.ndarray, wb: float,
            origin: np.ndarray, spacing: np.ndarray, dt: float, noise: float,
            z: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step in place for the alive rows of ``x``.

    The drift is ``(1-wb)*interp(fa) + wb*interp(fb)``. Returns the per-path
    low-density flag (uint8).
    """
    dims = x.shape[1]
    flags = np.zeros(x.shape[0], dtype=np.uint8)
    rows = np.nonzero(alive)[0]
    if rows.size == 0:
        return flags
    xa = x[rows]
    va, fla = interp_periodic(fa, mask_a, origin, spacing, xa)
    if wb != 0.0:
        vb, flb = interp_periodic(fb, mask_b, origin, spacing, xa)
        v = (1.0 - wb) * va + wb * vb
        fl = fla | flb
        v[fl != 0] = 0.0
    else:
        v, fl = va, fla
    x[rows] = xa + v * dt + noise * z[rows, :dims]
    flags[rows] = fl
    return flags
