"""Image blocks, per-block directional quadtrees and dense directional fields.

Quadtree nodes use implicit indexing: the node at depth ``d`` covering cell
``(iy, ix)`` of the ``2^d x 2^d`` grid over the square has id
``(4^d - 1) / 3 + iy * 2^d + ix``.  Ids are therefore stable across runs and
refinements, and "lowest leaf id" is a well-defined tie-break.  Rows index
``v`` (polar) and columns index ``u`` (azimuth), matching :mod:`lfguide.core`.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import FOUR_PI, InvalidArgument, Rng, dir_to_square, square_to_dir

MAGIC = b"LFGB"
CONTAINER_VERSION = 1
KIND_DENSE = 1
KIND_TREE = 2


class ActionInvalid(ValueError):
    pass


def _offset(d):
    return (4 ** d - 1) // 3


class DirTree:
    """Refinable quadtree over the direction square with Welford statistics.

    Leaves hold ``count``, RGB ``mean`` and RGB ``m2`` (sum of squared
    deviations).  ``count`` is real-valued because refinement splits it.
    """

    def __init__(self, max_depth: int = 5, init_depth: int = 2):
        if init_depth < 0 or max_depth < init_depth:
            raise InvalidArgument("need 0 <= init_depth <= max_depth")
        self.max_depth = int(max_depth)
        self.init_depth = int(init_depth)
        n = _offset(self.max_depth + 1)
        self.is_leaf = np.zeros(n, dtype=bool)
        self.count = np.zeros(n)
        self.mean = np.zeros((n, 3))
        self.m2 = np.zeros((n, 3))
        fine = 1 << self.max_depth
        self.leaf_map = np.zeros((fine, fine), dtype=np.int64)
        d = self.init_depth
        side = 1 << d
        ids = _offset(d) + np.arange(side * side)
        self.is_leaf[ids] = True
        scale = fine // side
        grid = ids.reshape(side, side)
        self.leaf_map[:] = np.repeat(np.repeat(grid, scale, axis=0), scale, axis=1)

    # -- structure

    @staticmethod
    def node_depth(node):
        node = np.asarray(node)
        d = np.zeros(node.shape, dtype=np.int64)
        for k in range(1, 16):
            d = np.where(node >= _offset(k), k, d)
        return d if d.ndim else int(d)

    def node_cell(self, node):
        d = self.node_depth(node)
        local = node - _offset(d)
        side = 1 << d
        return d, local // side, local % side

    def leaves(self):
        return np.flatnonzero(self.is_leaf)

    @property
    def n_leaves(self):
        return int(self.is_leaf.sum())

    def leaf_bounds(self, node):
        """``(u0, v0, size)`` of a node's square."""
        d, iy, ix = self.node_cell(node)
        size = 1.0 / 2.0 ** d
        return ix * size, iy * size, size

    def solid_angle(self, node):
        d = self.node_depth(node)
        return FOUR_PI / 4.0 ** d

    def depth_histogram(self):
        h = np.zeros(self.max_depth + 1)
        for d in self.node_depth(self.leaves()).ravel():
            h[d] += 1
        return h

    def locate(self, dirs):
        """Leaf ids containing unit directions ``(N, 3)``."""
        s = dir_to_square(dirs)
        fine = 1 << self.max_depth
        iu = np.minimum((s[..., 0] * fine).astype(np.int64), fine - 1)
        iv = np.minimum((s[..., 1] * fine).astype(np.int64), fine - 1)
        return self.leaf_map[iv, iu]

    # -- statistics

    def deposit(self, direction, radiance):
        """Welford update of the single leaf containing ``direction``."""
        L = np.asarray(radiance, dtype=np.float64)
        if not np.all(np.isfinite(L)):
            raise InvalidArgument("radiance must be finite")
        leaf = int(self.locate(np.asarray(direction, dtype=np.float64)[None])[0])
        self.count[leaf] += 1.0
        delta = L - self.mean[leaf]
        self.mean[leaf] += delta / self.count[leaf]
        self.m2[leaf] += delta * (L - self.mean[leaf])
        return leaf

    def deposit_many(self, dirs, radiance):
        """Batched deposit; equals sequential :meth:`deposit` calls up to
        floating-point rounding (pairwise merge of per-leaf batches)."""
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        L = np.asarray(radiance, dtype=np.float64).reshape(-1, 3)
        if len(dirs) == 0:
            return np.zeros(0, dtype=np.int64)
        if not np.all(np.isfinite(L)):
            raise InvalidArgument("radiance must be finite")
        leaf = self.locate(dirs)
        nodes, inv = np.unique(leaf, return_inverse=True)
        nb = np.bincount(inv).astype(np.float64)
        sb = np.stack([np.bincount(inv, weights=L[:, c]) for c in range(3)], axis=1)
        mb = sb / nb[:, None]
        dev = L - mb[inv]
        m2b = np.stack([np.bincount(inv, weights=dev[:, c] ** 2) for c in range(3)], axis=1)
        na = self.count[nodes]
        n = na + nb
        delta = mb - self.mean[nodes]
        self.mean[nodes] += delta * (nb / n)[:, None]
        self.m2[nodes] += m2b + delta ** 2 * (na * nb / n)[:, None]
        self.count[nodes] = n
        return leaf

    def variance(self, node):
        c = self.count[node]
        return np.where((c > 1)[..., None], self.m2[node] / np.maximum(c - 1, 1e-12)[..., None], 0.0)

    def total_count(self):
        return float(self.count[self.is_leaf].sum())

    def integral(self):
        """Sum of leaf mean radiance times leaf solid angle (RGB)."""
        lv = self.leaves()
        return (self.mean[lv] * self.solid_angle(lv)[:, None]).sum(axis=0)

    # -- refinement

    def can_refine(self, node):
        return bool(self.is_leaf[node]) and self.node_depth(node) < self.max_depth

    def refine(self, node: int):
        """Split a leaf into four children sharing its statistics evenly."""
        node = int(node)
        if not (0 <= node < len(self.is_leaf)) or not self.is_leaf[node]:
            raise ActionInvalid(f"node {node} is not a leaf")
        d, iy, ix = self.node_cell(node)
        if d >= self.max_depth:
            raise ActionInvalid(f"leaf {node} is at max depth {self.max_depth}")
        side = 1 << (d + 1)
        kids = [_offset(d + 1) + (2 * iy + a) * side + (2 * ix + b) for a in (0, 1) for b in (0, 1)]
        for k in kids:
            self.is_leaf[k] = True
            self.count[k] = self.count[node] / 4.0
            self.mean[k] = self.mean[node]
            self.m2[k] = self.m2[node] / 4.0
        self.is_leaf[node] = False
        self.count[node] = 0.0
        self.mean[node] = 0.0
        self.m2[node] = 0.0
        scale = (1 << self.max_depth) // side
        for k in kids:
            _, ky, kx = self.node_cell(k)
            self.leaf_map[ky * scale:(ky + 1) * scale, kx * scale:(kx + 1) * scale] = k
        return kids

    def sample_uniform_leaves(self, n: int, rng: Rng):
        """Directions with a uniformly chosen leaf, then uniform solid angle in
        it. Returns ``(dirs, pdf)``."""
        lv = self.leaves()
        pick = lv[rng.integers(0, len(lv), size=n)]
        u0, v0, size = self.leaf_bounds(pick)
        xi = rng.random((n, 2))
        s = np.stack([u0 + xi[:, 0] * size, v0 + xi[:, 1] * size], axis=-1)
        s = np.minimum(s, np.nextafter(1.0, 0.0))
        pdf = 1.0 / (len(lv) * self.solid_angle(pick))
        return square_to_dir(s), pdf

    def copy(self):
        t = DirTree.__new__(DirTree)
        t.max_depth, t.init_depth = self.max_depth, self.init_depth
        for k in ("is_leaf", "count", "mean", "m2", "leaf_map"):
            setattr(t, k, getattr(self, k).copy())
        return t

    def equals(self, other):
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("is_leaf", "count", "mean", "m2", "leaf_map"))


@dataclass
class DenseField:
    """``R x R`` RGB directional grid (rows = v, cols = u) with sample counts."""

    values: np.ndarray
    counts: np.ndarray
    variance: np.ndarray | None = None
    block_id: int = 0
    empty: bool = False
    low_confidence: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        r = self.values.shape[0]
        if self.values.shape != (r, r, 3) or self.counts.shape != (r, r):
            raise InvalidArgument(f"bad field shapes {self.values.shape}, {self.counts.shape}")
        if self.variance is not None:
            self.variance = np.asarray(self.variance, dtype=np.float64)

    @classmethod
    def zeros(cls, res, block_id=0, empty=False):
        return cls(np.zeros((res, res, 3)), np.zeros((res, res)), np.zeros((res, res, 3)), block_id, empty)

    @property
    def resolution(self):
        return self.values.shape[0]

    def integral(self):
        return self.values.sum(axis=(0, 1)) * FOUR_PI / self.resolution ** 2

    def downsample(self, factor: int = 2) -> "DenseField":
        r = self.resolution // factor

        def pool(a, op):
            return op(a.reshape(r, factor, r, factor, *a.shape[2:]), axis=(1, 3))

        var = None if self.variance is None else pool(self.variance, np.mean)
        return DenseField(pool(self.values, np.mean), pool(self.counts, np.sum), var, self.block_id, self.empty)

    def copy(self):
        return DenseField(self.values.copy(), self.counts.copy(),
                          None if self.variance is None else self.variance.copy(),
                          self.block_id, self.empty, self.low_confidence)


def tree_to_dense(tree: DirTree, res: int, block_id: int = 0) -> DenseField:
    """Rasterize leaves onto an ``res x res`` grid with pro-rated counts."""
    res = int(res)
    fine = 1 << tree.max_depth
    finest = int(tree.node_depth(tree.leaves()).max())
    if res < (1 << finest) or res & (res - 1):
        raise InvalidArgument(f"resolution {res} is coarser than the finest leaf (2^{finest}) or not a power of two")
    if res >= fine:
        rep = res // fine
        ids = np.repeat(np.repeat(tree.leaf_map, rep, axis=0), rep, axis=1)
    else:
        step = fine // res
        ids = tree.leaf_map[::step, ::step]
    cell_sa = FOUR_PI / res ** 2
    frac = cell_sa / tree.solid_angle(ids)
    counts = tree.count[ids] * frac
    return DenseField(values=tree.mean[ids].copy(), counts=counts, variance=tree.variance(ids),
                      block_id=block_id)


# --------------------------------------------------------------------------- blocks


@dataclass
class BlockState:
    block_id: int
    x0: int
    y0: int
    tree: DirTree
    points: object = None  # tracer.BlockPoints once attached to a scene
    dirs: list = field(default_factory=list)
    radiance: list = field(default_factory=list)
    pdfs: list = field(default_factory=list)

    @property
    def spent(self) -> int:
        return int(sum(len(d) for d in self.dirs))

    @property
    def n_samples(self) -> int:
        return self.spent

    def records(self):
        if not self.dirs:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        return np.concatenate(self.dirs), np.concatenate(self.radiance), np.concatenate(self.pdfs)

    @property
    def is_empty(self):
        return self.points is not None and len(self.points) == 0

    def copy(self):
        return BlockState(self.block_id, self.x0, self.y0, self.tree.copy(), self.points,
                          list(self.dirs), list(self.radiance), list(self.pdfs))


@dataclass
class BlockGrid:
    width: int
    height: int
    block_size: int
    rows: int
    cols: int
    blocks: list

    def block_of_pixel(self, px, py):
        return (np.asarray(py) // self.block_size) * self.cols + np.asarray(px) // self.block_size

    def pixel_block_map(self):
        py, px = np.mgrid[0:self.height, 0:self.width]
        return self.block_of_pixel(px, py)

    def attach(self, scene):
        """Compute each block's representative surface points."""
        from .tracer import block_points

        for b in self.blocks:
            b.points = block_points(scene, b.x0, b.y0, self.block_size)
        return self

    def copy(self):
        return BlockGrid(self.width, self.height, self.block_size, self.rows, self.cols,
                         [b.copy() for b in self.blocks])

    def total_spent(self):
        return sum(b.spent for b in self.blocks)


def init_blocks(width: int, height: int, block_size: int = 16, init_depth: int = 2,
                max_depth: int = 5) -> BlockGrid:
    """Tile the image with ``block_size`` blocks (the last row/column may
    overhang into padding); every block starts with a uniform tree."""
    if block_size <= 0:
        raise InvalidArgument("block size must be positive")
    if init_depth < 1:
        raise InvalidArgument("initial depth must be >= 1")
    rows = -(-height // block_size)
    cols = -(-width // block_size)
    blocks = [BlockState(r * cols + c, c * block_size, r * block_size, DirTree(max_depth, init_depth))
              for r in range(rows) for c in range(cols)]
    return BlockGrid(width, height, block_size, rows, cols, blocks)


# --------------------------------------------------------------------------- actions


@dataclass(frozen=True)
class SamplingAction:
    kind: str  # "resample" | "refine"
    block: int
    leaf: int = -1

    def __post_init__(self):
        if self.kind not in ("resample", "refine"):
            raise InvalidArgument(f"unknown action kind {self.kind!r}")


def resample_cost(block: BlockState) -> int:
    return max(1, block.n_samples)


def action_cost(grid: BlockGrid, action: SamplingAction) -> int:
    if action.kind == "refine":
        return 1
    return resample_cost(grid.blocks[action.block])


def resample(block: BlockState, scene, rng: Rng, max_depth: int = 5):
    """Double the block's sample count (0 -> 1). New directions pick a leaf
    uniformly, then a uniform direction inside it."""
    from .tracer import incident_radiance_at

    n_new = resample_cost(block)
    dirs, pdf = block.tree.sample_uniform_leaves(n_new, rng)
    if block.points is None or len(block.points) == 0:
        L = np.zeros((n_new, 3))
    else:
        pick = rng.integers(0, len(block.points), size=n_new)
        L = incident_radiance_at(scene, block.points.position[pick], block.points.normal[pick], dirs, rng,
                                 max_depth)
    block.tree.deposit_many(dirs, L)
    block.dirs.append(dirs)
    block.radiance.append(L)
    block.pdfs.append(pdf)
    return dirs, L, pdf


def refine(tree: DirTree, leaf: int):
    return tree.refine(leaf)


def execute_action(grid: BlockGrid, action: SamplingAction, scene, rng: Rng, max_depth: int = 5) -> int:
    """Apply an action in place and return its budget cost."""
    if not 0 <= action.block < len(grid.blocks):
        raise ActionInvalid(f"no block {action.block}")
    cost = action_cost(grid, action)
    blk = grid.blocks[action.block]
    if action.kind == "resample":
        resample(blk, scene, rng, max_depth)
    else:
        blk.tree.refine(action.leaf)
    return cost


def rebin_records(tree: DirTree, dirs, radiance) -> DirTree:
    """Exact re-binning of raw records into a fresh tree of the same shape."""
    t = tree.copy()
    t.count[:] = 0
    t.mean[:] = 0
    t.m2[:] = 0
    t.deposit_many(dirs, radiance)
    return t


# --------------------------------------------------------------------------- binary container
#
# Little-endian layout:
#   magic "LFGB" | u16 version | u16 kind | payload
# DenseField payload:
#   i64 block_id | u32 R | u32 flags (1 empty, 2 low_confidence, 4 has variance)
#   f64[R*R*3] values | f64[R*R] counts | f64[R*R*3] variance (if flag 4)
# DirTree payload:
#   u32 max_depth | u32 init_depth | u32 n_leaves
#   n_leaves x (u32 node | f64 count | f64[3] mean | f64[3] m2)


def dense_to_bytes(f: DenseField) -> bytes:
    flags = (1 if f.empty else 0) | (2 if f.low_confidence else 0) | (4 if f.variance is not None else 0)
    out = [MAGIC, struct.pack("<HHqII", CONTAINER_VERSION, KIND_DENSE, f.block_id, f.resolution, flags),
           f.values.astype("<f8").tobytes(), f.counts.astype("<f8").tobytes()]
    if f.variance is not None:
        out.append(f.variance.astype("<f8").tobytes())
    return b"".join(out)


def tree_to_bytes(t: DirTree) -> bytes:
    lv = t.leaves()
    rec = np.zeros(len(lv), dtype=[("node", "<u4"), ("count", "<f8"), ("mean", "<f8", 3), ("m2", "<f8", 3)])
    rec["node"], rec["count"], rec["mean"], rec["m2"] = lv, t.count[lv], t.mean[lv], t.m2[lv]
    head = struct.pack("<HHIII", CONTAINER_VERSION, KIND_TREE, t.max_depth, t.init_depth, len(lv))
    return MAGIC + head + rec.tobytes()


def from_bytes(buf: bytes):
    if buf[:4] != MAGIC:
        raise InvalidArgument("not an LFGB container")
    version, kind = struct.unpack_from("<HH", buf, 4)
    if version != CONTAINER_VERSION:
        raise InvalidArgument(f"unsupported container version {version}")
    if kind == KIND_DENSE:
        block_id, r, flags = struct.unpack_from("<qII", buf, 8)
        pos = 8 + 16
        n = r * r
        values = np.frombuffer(buf, "<f8", n * 3, pos).reshape(r, r, 3).copy()
        pos += n * 24
        counts = np.frombuffer(buf, "<f8", n, pos).reshape(r, r).copy()
        pos += n * 8
        var = None
        if flags & 4:
            var = np.frombuffer(buf, "<f8", n * 3, pos).reshape(r, r, 3).copy()
        return DenseField(values, counts, var, block_id, bool(flags & 1), bool(flags & 2))
    if kind == KIND_TREE:
        max_depth, init_depth, nl = struct.unpack_from("<III", buf, 8)
        rec = np.frombuffer(buf, dtype=[("node", "<u4"), ("count", "<f8"), ("mean", "<f8", 3), ("m2", "<f8", 3)],
                            count=nl, offset=20)
        t = DirTree(max_depth, init_depth)
        t.is_leaf[:] = False
        nodes = rec["node"].astype(np.int64)
        t.is_leaf[nodes] = True
        t.count[nodes], t.mean[nodes], t.m2[nodes] = rec["count"], rec["mean"], rec["m2"]
        fine = 1 << max_depth
        for nd in nodes:
            d, iy, ix = t.node_cell(int(nd))
            s = fine >> d
            t.leaf_map[iy * s:(iy + 1) * s, ix * s:(ix + 1) * s] = nd
        return t
    raise InvalidArgument(f"unknown container kind {kind}")


def save(obj, path):
    buf = dense_to_bytes(obj) if isinstance(obj, DenseField) else tree_to_bytes(obj)
    with open(path, "wb") as f:
        f.write(buf)


def load(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())
