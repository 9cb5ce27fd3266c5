"""Numerical foundation: seedable RNG streams, the equal-area sphere/square
mapping, discrete grid sampling and the relMSE error metric.

Directions on the sphere are parameterized by the cylindrical equal-area map

    u = 0.5 + atan2(y, x) / 2pi,    v = (z + 1) / 2

so an area ``A`` of the unit square covers a solid angle of exactly ``4 pi A``.
All functions accept batched arrays with the vector/coordinate axis last.
"""
from __future__ import annotations

import numpy as np

FOUR_PI = 4.0 * np.pi
RELMSE_DELTA = 1e-2
_ONE_MINUS_ULP = np.nextafter(1.0, 0.0)


class InvalidArgument(ValueError):
    pass


class InvalidDistribution(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


class Rng:
    """Counter-based random stream keyed by ``(seed, *stream)``.

    Backed by numpy's Philox generator, so two instances built from the same
    key produce bitwise-identical sequences no matter how many other streams
    were created or consumed in between.
    """

    def __init__(self, seed: int = 0, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.gen = np.random.Generator(np.random.Philox(seq))

    def derive(self, *substream: int) -> "Rng":
        return Rng(self.seed, *self.stream, *substream)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.gen.permutation(x)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def normalize(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def luminance(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.2126 + rgb[..., 1] * 0.7152 + rgb[..., 2] * 0.0722


def dir_to_square(d):
    """Map unit direction(s) ``(..., 3)`` to square coordinates ``(..., 2)``."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != 3:
        raise InvalidArgument(f"expected (..., 3) directions, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise InvalidArgument("non-finite direction")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    u = 0.5 + np.arctan2(y, x) / (2.0 * np.pi)
    u = np.where(u >= 1.0, u - 1.0, u)
    u = np.where(u < 0.0, u + 1.0, u)
    v = (np.clip(z, -1.0, 1.0) + 1.0) * 0.5
    u = np.minimum(u, _ONE_MINUS_ULP)
    v = np.minimum(v, _ONE_MINUS_ULP)
    return np.stack([u, v], axis=-1)


def square_to_dir(s):
    """Inverse of :func:`dir_to_square`; ``s`` must lie in ``[0, 1)^2``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != 2:
        raise InvalidArgument(f"expected (..., 2) coordinates, got shape {s.shape}")
    if not np.all(np.isfinite(s)) or np.any(s < 0.0) or np.any(s >= 1.0):
        raise InvalidArgument("square coordinates must lie in [0, 1)")
    u, v = s[..., 0], s[..., 1]
    z = 2.0 * v - 1.0
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * (u - 0.5)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def cell_index(s, res: int):
    """Integer (row=v, col=u) cell of square coords on a ``res x res`` grid."""
    s = np.asarray(s)
    iu = np.minimum((s[..., 0] * res).astype(np.int64), res - 1)
    iv = np.minimum((s[..., 1] * res).astype(np.int64), res - 1)
    return iv, iu


def sample_discrete_grid(weights, rng: Rng, n: int | None = None):
    """Draw cell(s) of a 2-D weight grid with probability ``w / sum(w)``.

    Returns ``((row, col), prob)``; scalars when ``n`` is None, arrays of
    length ``n`` otherwise.  ``prob`` is computed directly from the weights,
    not from the cumulative table, so it is exact.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise InvalidArgument("weights must be a 2-D grid")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidDistribution("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise InvalidDistribution("all weights are zero")
    flat = w.ravel()
    cdf = np.cumsum(flat)
    xi = rng.random(1 if n is None else n) * cdf[-1]
    idx = np.searchsorted(cdf, xi, side="right")
    idx = np.minimum(idx, flat.size - 1)
    # side='right' can still land on a zero-weight cell when xi hits an exact
    # boundary followed by zeros; walk back to the owning nonzero cell
    bad = flat[idx] == 0
    if np.any(bad):
        nz = np.flatnonzero(flat > 0)
        pos = np.searchsorted(nz, idx[bad], side="right") - 1
        idx[bad] = nz[np.maximum(pos, 0)]
    prob = flat[idx] / total
    rows, cols = np.divmod(idx, w.shape[1])
    if n is None:
        return (int(rows[0]), int(cols[0])), float(prob[0])
    return (rows, cols), prob


def relmse(a, b, delta: float = RELMSE_DELTA) -> float:
    """Mean of ``(a - b)^2 / (b^2 + delta)`` over all elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2 / (b * b + delta)))


def orthonormal_basis(n):
    """Tangent frames ``(t, b)`` for unit normals ``n`` (..., 3), branchless
    construction of Duff et al."""
    n = np.asarray(n, dtype=np.float64)
    sign = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = np.stack([1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1)
    bt = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return t, bt
