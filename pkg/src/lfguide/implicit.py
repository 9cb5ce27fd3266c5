"""Coordinate-network radiance field over (block position, direction).

The field maps a 4-D light-field coordinate, the block center ``(x, y)`` in
``[0, 1]^2`` and the direction-square position ``(u, v)``, through a
frequency encoding and a small MLP to non-negative RGB radiance.  It is fitted
to the same samples the explicit action loop collects and can replace the
per-block quadtree as the source of guiding distributions.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .core import InvalidArgument, Rng, dir_to_square, luminance, relmse
from .field import DenseField

DELTA = 1e-2


def positional_encoding(x, levels: int):
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``.

    Scalars give a vector of length ``1 + 2L``; an ``(N, k)`` array gives
    ``(N, k (1 + 2L))`` with each axis encoded in turn.
    """
    if levels < 0:
        raise InvalidArgument("encoding level must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x2 = np.atleast_1d(x)[..., None] if x.ndim <= 1 else x[..., None]
    parts = [x2]
    for k in range(levels):
        a = (2.0 ** k) * np.pi * x2
        parts += [np.sin(a), np.cos(a)]
    enc = np.concatenate(parts, axis=-1)
    if scalar:
        return enc[0]
    if x.ndim <= 1:
        return enc
    return enc.reshape(x.shape[0], -1)


@dataclass
class ImplicitConfig:
    levels: int = 4
    hidden: tuple = (64, 64)
    epochs: int = 300
    batch: int = 256
    lr: float = 3e-3
    val_fraction: float = 0.2
    seed: int = 0
    resolution: int = 16


@dataclass
class ImplicitField:
    """Network plus the radiance scale its softplus head is multiplied by."""

    net: nn.Network
    levels: int = 4
    scale: float = 1.0

    def meta(self):
        return json.dumps({"model": "implicit", "levels": self.levels, "scale": self.scale})


@dataclass
class FitReport:
    final_loss: float
    val_relmse: float
    epochs: int
    wall_time: float
    best_epoch: int = 0
    history: list = field(default_factory=list)


def make_implicit(rng: Rng, levels: int = 4, hidden=(64, 64), scale: float = 1.0) -> ImplicitField:
    net = nn.mlp([4 * (1 + 2 * levels), *hidden, 3], rng, out="softplus", zero_last=True)
    return ImplicitField(net, levels, scale)


def _inputs(block_uv, square_uv, levels):
    c = np.concatenate([np.asarray(block_uv, dtype=np.float64).reshape(-1, 2),
                        np.asarray(square_uv, dtype=np.float64).reshape(-1, 2)], axis=1)
    return positional_encoding(c, levels)


def implicit_query(fld: ImplicitField, block_uv, dirs):
    """RGB radiance at block coordinates ``(N, 2)`` and unit directions ``(N, 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    bu = np.broadcast_to(np.asarray(block_uv, dtype=np.float64).reshape(-1, 2), (len(dirs), 2))
    return _query_square(fld, bu, dir_to_square(dirs))


def _query_square(fld, block_uv, square_uv):
    x = _inputs(block_uv, square_uv, fld.levels)
    return nn.predict(fld.net, x) * fld.scale


@dataclass
class ImplicitSamples:
    """Flat sample records: block coordinate, direction, radiance."""

    block_uv: np.ndarray
    dirs: np.ndarray
    radiance: np.ndarray

    def __len__(self):
        return len(self.dirs)


def block_center_uv(grid, block):
    return np.array([(block.x0 + 0.5 * grid.block_size) / grid.width,
                     (block.y0 + 0.5 * grid.block_size) / grid.height])


def samples_from_grid(grid) -> ImplicitSamples:
    bu, ds, ls = [], [], []
    for b in grid.blocks:
        d, L, _ = b.records()
        if len(d) == 0:
            continue
        bu.append(np.broadcast_to(block_center_uv(grid, b), (len(d), 2)))
        ds.append(d)
        ls.append(L)
    if not ds:
        return ImplicitSamples(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)))
    return ImplicitSamples(np.concatenate(bu), np.concatenate(ds), np.concatenate(ls))


def _aggregate(samples: ImplicitSamples, res: int):
    """Per (block coordinate, direction cell) mean radiance and count."""
    s = dir_to_square(samples.dirs)
    iu = np.minimum((s[:, 0] * res).astype(np.int64), res - 1)
    iv = np.minimum((s[:, 1] * res).astype(np.int64), res - 1)
    keys = np.concatenate([samples.block_uv, iu[:, None], iv[:, None]], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    cnt = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    mean = np.stack([np.bincount(inv, samples.radiance[:, k], len(uniq)) for k in range(3)], axis=1) / cnt[:, None]
    sq = np.stack([(uniq[:, 2] + 0.5) / res, (uniq[:, 3] + 0.5) / res], axis=1)
    return uniq[:, :2], sq, mean, cnt


def _loss(net, x, y, w, scale, grad=True):
    out, cache = nn.forward(net, x)
    pred = out * scale
    diff = pred - y
    inv = 1.0 / (y * y + DELTA)
    wn = w / w.sum()
    loss = float(np.sum(wn[:, None] * diff * diff * inv) / 3.0)
    if not grad:
        return loss, None
    g = 2.0 * wn[:, None] * diff * inv * scale / 3.0
    grads, _ = nn.backward(net, cache, g)
    return loss, grads


def fit_implicit(samples: ImplicitSamples, config: ImplicitConfig | None = None):
    """Fit the field to count-weighted per-cell means; returns the
    best-validation parameters and a :class:`FitReport`."""
    cfg = config or ImplicitConfig()
    if len(samples) == 0:
        raise InvalidArgument("no samples to fit")
    t0 = time.perf_counter()
    bu, sq, y, w = _aggregate(samples, cfg.resolution)
    scale = max(float(np.sum(luminance(y) * w) / w.sum()), 1e-3)
    rng = Rng(cfg.seed, 17)
    fld = make_implicit(rng.derive(1), cfg.levels, cfg.hidden, scale)
    x = _inputs(bu, sq, cfg.levels)
    n = len(x)
    order = rng.permutation(n)
    n_val = int(round(n * cfg.val_fraction)) if n >= 5 else 0
    vi, ti = order[:n_val], order[n_val:]
    if n_val == 0:
        vi = ti
    state = nn.AdamState.zeros_like(fld.net)
    best, best_net, best_ep = np.inf, fld.net.copy(), 0
    hist = []
    loss = np.nan
    for ep in range(cfg.epochs):
        perm = ti[rng.permutation(len(ti))]
        tot = 0.0
        for b0 in range(0, len(perm), cfg.batch):
            idx = perm[b0:b0 + cfg.batch]
            loss, grads = _loss(fld.net, x[idx], y[idx], w[idx], scale)
            tot += loss * w[idx].sum()
            nn.adam_step(fld.net, grads, state, lr=cfg.lr)
        tl = tot / w[ti].sum()
        vl = _loss(fld.net, x[vi], y[vi], w[vi], scale, grad=False)[0]
        hist.append((ep + 1, tl, vl))
        if vl < best:
            best, best_net, best_ep = vl, fld.net.copy(), ep + 1
    fld.net = best_net
    pred = nn.predict(fld.net, x[vi]) * scale
    rep = FitReport(final_loss=float(hist[-1][1]), val_relmse=relmse(pred, y[vi]), epochs=cfg.epochs,
                    wall_time=time.perf_counter() - t0, best_epoch=best_ep, history=hist)
    return fld, rep


def implicit_to_pdf(fld: ImplicitField, block_uv, res: int, block_id: int = 0) -> DenseField:
    """Field evaluated at the centers of the ``res x res`` direction grid,
    ready for :func:`lfguide.guide.build_guide`."""
    if res < 2:
        raise InvalidArgument("resolution must be >= 2")
    c = (np.arange(res) + 0.5) / res
    v, u = np.meshgrid(c, c, indexing="ij")
    sq = np.stack([u.ravel(), v.ravel()], axis=1)
    bu = np.broadcast_to(np.asarray(block_uv, dtype=np.float64).reshape(1, 2), (len(sq), 2))
    vals = _query_square(fld, bu, sq).reshape(res, res, 3)
    return DenseField(vals, np.ones((res, res)), None, block_id)


def implicit_guide(fld: ImplicitField, grid, res: int, alpha: float = 0.5, eps_floor: float = 0.1):
    from .guide import build_guides

    return build_guides([implicit_to_pdf(fld, block_center_uv(grid, b), res, b.block_id) for b in grid.blocks],
                        alpha, eps_floor)


def save(fld: ImplicitField, path):
    nn.save(fld.net, path, fld.meta())


def load(path) -> ImplicitField:
    net, meta = nn.load(path)
    m = json.loads(meta)
    if m.get("model") != "implicit":
        raise InvalidArgument("not an implicit-field checkpoint")
    return ImplicitField(net, int(m["levels"]), float(m["scale"]))


# --------------------------------------------------------------------------- comparison

COMPARE_FIELDS = ["representation", "field_relmse", "guided_relmse", "fit_time", "infer_time"]


@dataclass
class CompareConfig:
    block_size: int = 8
    init_depth: int = 2
    max_depth: int = 4
    gt_spp: int = 256
    spp: int = 16
    reference_spp: int = 512
    alpha: float = 0.5
    eps_floor: float = 0.1
    seed: int = 0
    max_trace_depth: int = 5
    r_model: object = None
    implicit: ImplicitConfig = field(default_factory=ImplicitConfig)


def compare_representations(scene, budget: int, config: CompareConfig | None = None, reference=None):
    """Equal-sample comparison of the explicit quadtree and the implicit field.

    Both consume the samples of one heuristic action-loop run.  Returns a list
    of two row dicts with the keys in ``COMPARE_FIELDS``.
    """
    from .field import init_blocks
    from .guide import adaptive_loop, build_guides, reconstruct_grid
    from .tracer import bake_ground_truth, render

    cfg = config or CompareConfig()
    cam = scene.camera
    res = 1 << cfg.max_depth
    rng = Rng(cfg.seed, 23)
    grid = init_blocks(cam.width, cam.height, cfg.block_size, cfg.init_depth, cfg.max_depth).attach(scene)
    adaptive_loop(scene, grid, "heuristic", budget, rng.derive(1), max_trace_depth=cfg.max_trace_depth)
    gts = [bake_ground_truth(scene, b.points, res, cfg.gt_spp, rng.derive(2, b.block_id), b.block_id,
                             cfg.max_trace_depth) for b in grid.blocks]
    live = [i for i, b in enumerate(grid.blocks) if not b.is_empty]
    if reference is None:
        reference, _ = render(scene, cfg.reference_spp, rng.derive(3), max_depth=cfg.max_trace_depth)
    pix = grid.pixel_block_map()
    rows = []

    t0 = time.perf_counter()
    recons = reconstruct_grid(grid, res, cfg.r_model)
    t_fit_e = time.perf_counter() - t0
    t0 = time.perf_counter()
    g_e = build_guides(recons, cfg.alpha, cfg.eps_floor)
    t_inf_e = time.perf_counter() - t0
    img, _ = render(scene, cfg.spp, rng.derive(4), guide=g_e, block_of_pixel=pix, max_depth=cfg.max_trace_depth)
    rows.append({"representation": "explicit",
                 "field_relmse": float(np.mean([relmse(recons[i].values, gts[i].values) for i in live])),
                 "guided_relmse": relmse(img, reference), "fit_time": t_fit_e, "infer_time": t_inf_e})

    t0 = time.perf_counter()
    fld, _ = fit_implicit(samples_from_grid(grid), ImplicitConfig(**{**cfg.implicit.__dict__, "resolution": res}))
    t_fit_i = time.perf_counter() - t0
    t0 = time.perf_counter()
    dens = [implicit_to_pdf(fld, block_center_uv(grid, b), res, b.block_id) for b in grid.blocks]
    g_i = build_guides(dens, cfg.alpha, cfg.eps_floor)
    t_inf_i = time.perf_counter() - t0
    img, _ = render(scene, cfg.spp, rng.derive(4), guide=g_i, block_of_pixel=pix, max_depth=cfg.max_trace_depth)
    rows.append({"representation": "implicit",
                 "field_relmse": float(np.mean([relmse(dens[i].values, gts[i].values) for i in live])),
                 "guided_relmse": relmse(img, reference), "fit_time": t_fit_i, "infer_time": t_inf_i})
    return rows


def write_comparison(rows, csv_path=None, text_path=None, scene_name=""):
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["scene"] + COMPARE_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({"scene": scene_name, **{k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k])
                                                    for k in COMPARE_FIELDS}})
    lines = [f"representation comparison {scene_name}".rstrip(),
             f"{'representation':<16}{'field relMSE':>14}{'guided relMSE':>15}{'fit s':>10}{'infer s':>10}"]
    for r in rows:
        lines.append(f"{r['representation']:<16}{r['field_relmse']:>14.5g}{r['guided_relmse']:>15.5g}"
                     f"{r['fit_time']:>10.3f}{r['infer_time']:>10.4f}")
    text = "\n".join(lines) + "\n"
    if text_path is not None:
        with open(text_path, "w") as f:
            f.write(text)
    return text
