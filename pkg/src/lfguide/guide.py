"""Guiding distributions built from reconstructed fields, the adaptive
sampling loop, and the guided rendering pipeline.

A :class:`GuidingDistribution` holds one piecewise-constant PMF per block over
the ``R x R`` direction grid.  Camera paths sample their first bounce from the
one-sample mixture ``alpha * BRDF + (1 - alpha) * guide`` and weight by the
exact mixture density, so the estimator stays unbiased as long as the guide
density is positive everywhere (the uniform floor guarantees it).
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import models
from .core import FOUR_PI, InvalidArgument, InvalidState, Rng, cell_index, dir_to_square, luminance, relmse
from .field import BlockGrid, SamplingAction, execute_action, init_blocks, tree_to_dense
from .tracer import eval_brdf_batch, render, sample_brdf_batch, sample_in_cells, _MaterialTable

log = logging.getLogger(__name__)


class GuidingDistribution:
    """Per-block directional PMFs (``pmf[k, row_v, col_u]``) plus mixture weights."""

    def __init__(self, pmf, alpha: float = 0.5, eps_floor: float = 0.1):
        pmf = np.asarray(pmf, dtype=np.float64)
        if pmf.ndim == 2:
            pmf = pmf[None]
        if not 0.0 <= alpha <= 1.0:
            raise InvalidArgument("alpha must lie in [0, 1]")
        self.pmf = pmf
        self.alpha = float(alpha)
        self.eps_floor = float(eps_floor)
        self.res = pmf.shape[-1]
        k = pmf.shape[0]
        cdf = np.cumsum(pmf.reshape(k, -1), axis=1)
        cdf /= cdf[:, -1:]
        self._flat_cdf = (cdf + np.arange(k)[:, None]).ravel()

    @property
    def n_blocks(self):
        return self.pmf.shape[0]

    def density(self, dirs, blocks=None):
        """Guide density (per sr) of directions under their blocks' PMFs."""
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        blocks = np.zeros(len(dirs), dtype=np.int64) if blocks is None else np.asarray(blocks)
        iv, iu = cell_index(dir_to_square(dirs), self.res)
        return self.pmf[blocks, iv, iu] * (self.res * self.res / FOUR_PI)

    def sample(self, blocks, rng: Rng):
        blocks = np.asarray(blocks, dtype=np.int64)
        n = len(blocks)
        r2 = self.res * self.res
        q = blocks + rng.random(n)
        idx = np.searchsorted(self._flat_cdf, q, side="right")
        cell = np.clip(idx - blocks * r2, 0, r2 - 1)
        iv, iu = np.divmod(cell, self.res)
        dirs = sample_in_cells(iv, iu, self.res, rng)
        return dirs, self.density(dirs, blocks)

    # interface used by tracer.trace_radiance

    def sample_mixture_batch(self, scene, mat, nrm, wo, blocks, rng: Rng):
        n = len(mat)
        use_brdf = rng.random(n) < self.alpha
        dirs = np.empty((n, 3))
        if np.any(use_brdf):
            dirs[use_brdf], _ = sample_brdf_batch(scene, mat[use_brdf], wo[use_brdf], nrm[use_brdf], rng)
        if np.any(~use_brdf):
            dirs[~use_brdf], _ = self.sample(blocks[~use_brdf], rng)
        return dirs, self.pdf_mixture_batch(scene, mat, nrm, wo, dirs, blocks)

    def pdf_mixture_batch(self, scene, mat, nrm, wo, dirs, blocks):
        pb = eval_brdf_batch(scene, mat, dirs, wo, nrm)[1] if self.alpha > 0 else 0.0
        pg = self.density(dirs, blocks) if self.alpha < 1 else 0.0
        return self.alpha * pb + (1.0 - self.alpha) * pg


def _pmf_from_field(values, eps_floor):
    lum = np.maximum(luminance(values), 0.0)
    r2 = lum.size
    tot = lum.sum()
    p = lum / tot if tot > 0 else np.full(lum.shape, 1.0 / r2)
    p = (1.0 - eps_floor) * p + eps_floor / r2
    return p / p.sum()


def build_guide(recon, alpha: float = 0.5, eps_floor: float = 0.1) -> GuidingDistribution:
    """PMF proportional to reconstructed luminance (cells have equal solid
    angle), mixed with a uniform floor."""
    if np.any(np.asarray(recon.values) < 0):
        raise InvalidArgument("reconstruction must be non-negative")
    return GuidingDistribution(_pmf_from_field(recon.values, eps_floor), alpha, eps_floor)


def build_guides(recons, alpha: float = 0.5, eps_floor: float = 0.1) -> GuidingDistribution:
    return GuidingDistribution(np.stack([_pmf_from_field(r.values, eps_floor) for r in recons]), alpha, eps_floor)


def _check_normal(normal):
    n = np.asarray(normal, dtype=np.float64)
    nn_ = np.linalg.norm(n)
    if not np.isfinite(nn_) or abs(nn_ - 1.0) > 1e-6:
        raise InvalidArgument("normal must be a finite unit vector")
    return n


def sample_mixture(guide: GuidingDistribution, material, normal, rng: Rng, wo=None, block: int = 0):
    """One mixture sample: ``(direction, pdf)``."""
    n = _check_normal(normal)
    wo = n if wo is None else np.asarray(wo, dtype=np.float64)
    tbl = _MaterialTable([material])
    d, p = guide.sample_mixture_batch(tbl, np.zeros(1, np.int64), n[None], wo[None], np.array([block]), rng)
    return d[0], float(p[0])


def pdf_mixture(guide: GuidingDistribution, material, normal, dirs, wo=None, block: int = 0):
    n = _check_normal(normal)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    m = len(dirs)
    wo = n if wo is None else np.asarray(wo, dtype=np.float64)
    tbl = _MaterialTable([material])
    p = guide.pdf_mixture_batch(tbl, np.zeros(m, np.int64), np.broadcast_to(n, (m, 3)),
                                np.broadcast_to(wo, (m, 3)), dirs, np.full(m, block))
    return p if m > 1 else float(p[0])


# --------------------------------------------------------------------------- adaptive loop


@dataclass
class ActionLogEntry:
    step: int
    block: int
    kind: str
    leaf: int
    value: float
    cost: int

    def line(self):
        return f"{self.step} {self.block} {self.kind} {self.leaf} {self.value!r} {self.cost}"

    @classmethod
    def parse(cls, line):
        s, b, k, lf, v, c = line.split()
        return cls(int(s), int(b), k, int(lf), float(v), int(c))


@dataclass
class LoopResult:
    grid: BlockGrid
    log: list
    spent: int
    stopped_early: bool = False
    note: str = ""


def _value_map(block, estimator, q_model, heuristic_cfg):
    if estimator == "heuristic":
        return models.heuristic_payoff(block, heuristic_cfg)
    if estimator == "learned":
        if q_model is None:
            raise InvalidState("learned estimator requires a Q checkpoint (train-q)")
        return models.predict_payoff(models.block_features(block), q_model, block)
    raise InvalidArgument(f"unknown estimator {estimator!r}")


def _rank(value, action):
    return (value, action.kind == "resample", -action.block, -action.leaf)


def adaptive_loop(scene, grid: BlockGrid, estimator: str, budget: int, rng: Rng, q_model=None,
                  heuristic_cfg=None, batch_k: int = 1, max_trace_depth: int = 5) -> LoopResult:
    """Greedy value-driven sampling until ``budget`` is spent.

    Each round refreshes value maps of blocks changed in the previous round,
    masks actions the remaining budget cannot pay for, and executes the
    global best (``batch_k`` best per round in batch mode).  Ties prefer
    Resample, then the lowest block id, then the lowest leaf id.
    """
    if any(b.points is None for b in grid.blocks):
        grid.attach(scene)
    remaining = int(budget)
    entries = []
    maps = {}
    dirty = {b.block_id for b in grid.blocks if not b.is_empty}
    step = 0
    note = ""
    while remaining > 0:
        for bid in sorted(dirty):
            maps[bid] = _value_map(grid.blocks[bid], estimator, q_model, heuristic_cfg)
        dirty = set()
        cands = []
        for bid in sorted(maps):
            vm = maps[bid]
            vm_m = models.ActionValueMap(vm.block_id, vm.resample, vm.leaves, vm.refine.copy())
            vm_m.mask_cost(grid.blocks[bid], remaining)
            v, a = vm_m.best()
            if v > models.MASKED:
                cands.append((_rank(v, a), v, a))
        if not cands:
            note = f"no valid action with {remaining} budget left"
            log.info(note)
            break
        cands.sort(key=lambda c: c[0], reverse=True)
        chosen, used_blocks = [], set()
        for c in cands:
            if c[2].block in used_blocks:
                continue
            chosen.append(c)
            used_blocks.add(c[2].block)
            if len(chosen) >= batch_k:
                break
        for _, v, a in chosen:
            cost = 1 if a.kind == "refine" else max(1, grid.blocks[a.block].n_samples)
            if cost > remaining:
                continue
            execute_action(grid, a, scene, rng.derive(step), max_trace_depth)
            remaining -= cost
            entries.append(ActionLogEntry(step, a.block, a.kind, a.leaf, float(v), cost))
            dirty.add(a.block)
            step += 1
    spent = int(budget) - remaining
    return LoopResult(grid, entries, spent, stopped_early=bool(note), note=note)


def write_action_log(path, entries):
    with open(path, "w") as f:
        f.write("# step block action leaf value cost\n")
        for e in entries:
            f.write(e.line() + "\n")


def read_action_log(path):
    with open(path) as f:
        return [ActionLogEntry.parse(l) for l in f if l.strip() and not l.startswith("#")]


def replay_actions(scene, grid: BlockGrid, entries, rng: Rng, max_trace_depth: int = 5) -> BlockGrid:
    """Re-execute a logged action sequence on a fresh grid."""
    if any(b.points is None for b in grid.blocks):
        grid.attach(scene)
    for e in entries:
        execute_action(grid, SamplingAction(e.kind, e.block, e.leaf), scene, rng.derive(e.step), max_trace_depth)
    return grid


def uniform_allocation(block, scene, budget: int, rng: Rng, max_trace_depth: int = 5):
    """Spend ``budget`` samples uniformly over the block's current leaves."""
    from .tracer import incident_radiance_at

    dirs, pdf = block.tree.sample_uniform_leaves(int(budget), rng)
    pick = rng.integers(0, max(len(block.points), 1), size=len(dirs))
    if len(block.points):
        L = incident_radiance_at(scene, block.points.position[pick], block.points.normal[pick], dirs, rng,
                                 max_trace_depth)
    else:
        L = np.zeros((len(dirs), 3))
    block.tree.deposit_many(dirs, L)
    block.dirs.append(dirs)
    block.radiance.append(L)
    block.pdfs.append(pdf)
    return block


# --------------------------------------------------------------------------- pipeline


@dataclass
class RenderConfig:
    block_size: int = 16
    init_depth: int = 2
    max_depth: int = 5
    budget: int = 4096
    estimator: str = "heuristic"  # heuristic | learned | none
    alpha: float = 0.5
    eps_floor: float = 0.1
    spp: int = 16
    seed: int = 0
    max_trace_depth: int = 5
    batch_k: int = 1
    r_model: object = None
    q_model: object = None


@dataclass
class RenderResult:
    image: np.ndarray
    stderr: np.ndarray
    metrics: dict
    blocks: list = field(default_factory=list)
    action_log: list = field(default_factory=list)
    guide: GuidingDistribution | None = None
    fields: list = field(default_factory=list)


def reconstruct_grid(grid: BlockGrid, res: int, r_model=None):
    """Dense reconstruction per block; blocks without samples borrow the mean
    of their sampled neighbours."""
    sparse = [tree_to_dense(b.tree, res, b.block_id) for b in grid.blocks]
    out = []
    for b, sp in zip(grid.blocks, sparse):
        if sp.counts.sum() > 0:
            out.append(models.reconstruct(sp, r_model))
            continue
        r, c = divmod(b.block_id, grid.cols)
        neigh = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < grid.rows and 0 <= cc < grid.cols:
                    o = sparse[rr * grid.cols + cc]
                    if o.counts.sum() > 0:
                        neigh.append((o.values * o.counts[..., None]).sum(axis=(0, 1)) / o.counts.sum())
        fb = np.mean(neigh, axis=0) if neigh else None
        out.append(models.reconstruct_baseline(sp, fallback=fb))
    return out


def render_guided(scene, config: RenderConfig, reference=None) -> RenderResult:
    """Adaptive sampling, reconstruction, guide construction and a final
    guided render. ``estimator="none"`` renders unguided at the same
    sample-equivalent budget."""
    cfg = config
    t0 = time.perf_counter()
    cam = scene.camera
    npix = cam.width * cam.height
    rng = Rng(cfg.seed, 1)
    res = 1 << cfg.max_depth
    if cfg.estimator == "learned" and (cfg.q_model is None or cfg.r_model is None):
        raise InvalidState("estimator=learned needs both R and Q checkpoints; run train-r then train-q")
    if cfg.estimator == "none":
        spp = cfg.spp + int(round(cfg.budget / npix))
        img, se = render(scene, spp, rng.derive(2), max_depth=cfg.max_trace_depth)
        metrics = {"scene": scene.name, "estimator": "unguided", "budget": cfg.budget,
                   "spp_equivalent": spp, "wall_time": time.perf_counter() - t0}
        if reference is not None:
            metrics["relmse"] = relmse(img, reference)
        return RenderResult(img, se, metrics)
    grid = init_blocks(cam.width, cam.height, cfg.block_size, cfg.init_depth, cfg.max_depth).attach(scene)
    loop = adaptive_loop(scene, grid, cfg.estimator, cfg.budget, rng.derive(3), q_model=cfg.q_model,
                         batch_k=cfg.batch_k, max_trace_depth=cfg.max_trace_depth)
    recons = reconstruct_grid(grid, res, cfg.r_model)
    guide = build_guides(recons, cfg.alpha, cfg.eps_floor)
    img, se = render(scene, cfg.spp, rng.derive(2), guide=guide, block_of_pixel=grid.pixel_block_map(),
                     max_depth=cfg.max_trace_depth)
    diag = []
    for b in grid.blocks:
        depths = b.tree.node_depth(b.tree.leaves())
        diag.append({"block": b.block_id, "samples": b.n_samples, "leaves": b.tree.n_leaves,
                     "max_depth": int(depths.max()), "empty": bool(b.is_empty)})
    metrics = {"scene": scene.name, "estimator": cfg.estimator, "budget": cfg.budget,
               "spp_equivalent": cfg.spp + loop.spent / npix, "wall_time": time.perf_counter() - t0}
    if reference is not None:
        metrics["relmse"] = relmse(img, reference)
    return RenderResult(img, se, metrics, diag, loop.log, guide, recons)


METRICS_FIELDS = ["scene", "estimator", "budget", "spp_equivalent", "relmse", "wall_time"]


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r.get(k), float) else r.get(k, "")) for k in METRICS_FIELDS})


def compare_estimators(scene, config: RenderConfig, reference, estimators=("none", "heuristic", "learned")):
    """Equal-budget relMSE rows for unguided and guided variants."""
    rows = []
    for est in estimators:
        if est == "learned" and (config.q_model is None or config.r_model is None):
            log.info("skipping learned estimator: no checkpoints")
            continue
        cfg = RenderConfig(**{**config.__dict__, "estimator": est})
        rows.append(render_guided(scene, cfg, reference).metrics)
    return rows
