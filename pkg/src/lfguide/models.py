"""Reconstructors (R) and action-value estimators (Q), rewards, and the two
training loops.

Action values everywhere are *benefit per unit of budget*: the expected drop
in reconstruction relMSE divided by the action's cost (Resample costs the
block's current sample count, Refine costs 1).  A Refine leaves the dense
field unchanged on its own, so its realized benefit is measured as the
marginal gain of refine-then-resample over resample alone, with both branches
drawing the same random numbers.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import nn
from .core import InvalidArgument, InvalidState, Rng, luminance, relmse
from .field import (
    BlockState,
    DenseField,
    DirTree,
    SamplingAction,
    resample,
    resample_cost,
    tree_to_dense,
)

log = logging.getLogger(__name__)

DELTA = 1e-2
MASKED = -np.inf
MUST_SAMPLE = np.inf


# --------------------------------------------------------------------------- reconstruction


def _blur(a, sigma):
    # axis 0 = v (clamped at the poles), axis 1 = u (periodic)
    a = gaussian_filter1d(a, sigma, axis=1, mode="wrap")
    return gaussian_filter1d(a, sigma, axis=0, mode="nearest")


def reconstruct_baseline(sparse: DenseField, sigma: float = 1.5, fallback=None) -> DenseField:
    """Count-weighted Gaussian blur with iterative hole filling.

    ``fallback`` (RGB) is used when the block holds no samples at all; the
    result is then flagged ``low_confidence``.
    """
    c = np.asarray(sparse.counts, dtype=np.float64)
    if np.any(c < 0):
        raise InvalidArgument("counts must be non-negative")
    r = sparse.resolution
    if not np.any(c > 0):
        val = np.zeros(3) if fallback is None else np.asarray(fallback, dtype=np.float64)
        out = DenseField(np.broadcast_to(val, (r, r, 3)).copy(), c.copy(), None, sparse.block_id,
                         sparse.empty, low_confidence=True)
        return out
    x = sparse.values
    num = np.stack([_blur(c * x[..., k], sigma) for k in range(3)], axis=-1)
    den = _blur(c, sigma)
    covered = den > 1e-12 * den.max()
    out = np.where(covered[..., None], num / np.where(covered, den, 1.0)[..., None], 0.0)
    while not covered.all():
        w = covered.astype(np.float64)
        num = np.stack([_blur(w * out[..., k], sigma) for k in range(3)], axis=-1)
        den = _blur(w, sigma)
        new = ~covered & (den > 1e-12 * den.max())
        if not new.any():
            # disconnected by truncation; fall back to the covered mean
            out[~covered] = out[covered].mean(axis=0)
            break
        out[new] = num[new] / den[new][:, None]
        covered |= new
    return DenseField(np.maximum(out, 0.0), c.copy(), None, sparse.block_id, sparse.empty)


def _scale(sparse: DenseField):
    c = sparse.counts
    if c.sum() <= 0:
        return 1e-3
    return max(float((luminance(sparse.values) * c).sum() / c.sum()), 1e-3)


R_IN_CHANNELS = 8


def inv_softplus(y, floor=1e-4):
    y = np.maximum(y, floor)
    return y + np.log(-np.expm1(-y))


def r_inputs(sparse: DenseField, base: DenseField | None = None):
    """Network input ``(8, R, R)`` and the block scale used to normalize it.

    Channels: mean RGB, log count, relative std-dev, baseline reconstruction
    RGB.  Radiance channels are scale-normalized and mapped through the
    inverse softplus, so passing a channel straight through to the softplus
    head is a linear map.
    """
    s = _scale(sparse)
    if base is None:
        base = reconstruct_baseline(sparse)
    var = sparse.variance if sparse.variance is not None else np.zeros_like(sparse.values)
    rel_sd = np.sqrt(np.maximum(luminance(var), 0.0)) / s
    x = np.concatenate([
        np.moveaxis(inv_softplus(sparse.values / s), -1, 0),
        np.log1p(sparse.counts)[None],
        np.log1p(np.minimum(rel_sd, 1e3))[None],
        np.moveaxis(inv_softplus(base.values / s), -1, 0),
    ])
    return x, s


@dataclass
class RModel:
    net: nn.Network
    resolution: int
    history: list = field(default_factory=list)

    def meta(self):
        return json.dumps({"model": "R", "resolution": self.resolution})


def make_r_model(resolution: int, rng: Rng, width: int = 16, layers: int = 3) -> RModel:
    ch = [R_IN_CHANNELS] + [width] * (layers - 1) + [3]
    net = nn.convnet(ch, rng, k=3, out="softplus", padding="sphere", zero_last=True)
    return RModel(net, resolution)


def reconstruct_learned(sparse: DenseField, model: RModel) -> DenseField:
    """R-network reconstruction; output = block scale x softplus(net)."""
    if sparse.resolution != model.resolution:
        raise InvalidArgument(f"field resolution {sparse.resolution} != model resolution {model.resolution}")
    x, s = r_inputs(sparse)
    y = nn.predict(model.net, x[None])[0]
    return DenseField(np.moveaxis(y, 0, -1) * s, sparse.counts.copy(), None, sparse.block_id, sparse.empty)


def reconstruct(sparse: DenseField, model: RModel | None = None) -> DenseField:
    return reconstruct_baseline(sparse) if model is None else reconstruct_learned(sparse, model)


@dataclass
class TrainingExample:
    sparse: DenseField
    target: DenseField

    def __post_init__(self):
        if self.sparse.resolution != self.target.resolution:
            raise InvalidArgument("input/target resolution mismatch")


def _r_batch(examples):
    xs, ss, ys = [], [], []
    for ex in examples:
        x, s = r_inputs(ex.sparse)
        xs.append(x)
        ss.append(s)
        ys.append(np.moveaxis(ex.target.values, -1, 0))
    return np.stack(xs), np.array(ss), np.stack(ys)


def _r_loss(net, x, s, y, grad=True):
    out, cache = nn.forward(net, x)
    pred = out * s[:, None, None, None]
    w = 1.0 / (y * y + DELTA)
    diff = pred - y
    per = (diff * diff * w).reshape(len(x), -1).mean(axis=1)
    if not grad:
        return per, None
    g = 2.0 * diff * w * s[:, None, None, None] / (diff[0].size * len(x))
    grads, _ = nn.backward(net, cache, g)
    return per, grads


def evaluate_r(model: RModel | None, examples) -> float:
    """Mean relMSE of a reconstructor (baseline when ``model`` is None)."""
    return float(np.mean([relmse(reconstruct(ex.sparse, model).values, ex.target.values) for ex in examples]))


@dataclass
class RConfig:
    epochs: int = 40
    batch: int = 8
    lr: float = 2e-3
    val_fraction: float = 0.2
    seed: int = 0
    width: int = 16
    layers: int = 3


def train_r(dataset, config: RConfig | None = None, log_csv=None) -> RModel:
    """Train the reconstructor; returns the best-validation checkpoint.

    ``dataset`` is a list of :class:`TrainingExample` at a single resolution.
    """
    cfg = config or RConfig()
    if not dataset:
        raise InvalidArgument("empty dataset")
    res = dataset[0].sparse.resolution
    if any(ex.sparse.resolution != res for ex in dataset):
        raise InvalidArgument("mixed resolutions in dataset")
    rng = Rng(cfg.seed, 11)
    order = rng.permutation(len(dataset))
    n_val = int(round(len(dataset) * cfg.val_fraction)) if len(dataset) >= 5 else 0
    val = [dataset[i] for i in order[:n_val]]
    train = [dataset[i] for i in order[n_val:]]
    xt, st, yt = _r_batch(train)
    xv, sv, yv = _r_batch(val) if val else (xt, st, yt)
    model = make_r_model(res, rng.derive(1), cfg.width, cfg.layers)
    state = nn.AdamState.zeros_like(model.net)
    best, best_net = np.inf, model.net.copy()
    hist = []
    for ep in range(cfg.epochs):
        perm = rng.permutation(len(train))
        losses = []
        for b0 in range(0, len(train), cfg.batch):
            idx = perm[b0:b0 + cfg.batch]
            per, grads = _r_loss(model.net, xt[idx], st[idx], yt[idx])
            losses.append(per.mean() * len(idx))
            nn.adam_step(model.net, grads, state, lr=cfg.lr)
        tl = float(np.sum(losses) / len(train))
        vl = float(_r_loss(model.net, xv, sv, yv, grad=False)[0].mean())
        hist.append((ep + 1, tl, vl))
        if vl < best:
            best, best_net = vl, model.net.copy()
    if log_csv is not None:
        write_training_log(log_csv, hist)
    out = RModel(best_net, res, hist)
    return out


def write_training_log(path, hist):
    with open(path, "w") as f:
        f.write("epoch,loss,val_loss\n")
        for ep, tl, vl in hist:
            f.write(f"{ep},{tl:.10g},{vl:.10g}\n")


# --------------------------------------------------------------------------- rewards


def compute_reward(before: DenseField, after: DenseField, gt: DenseField, model: RModel | None = None) -> float:
    """Error reduction of ``after`` over ``before`` (may be negative)."""
    if not (before.resolution == after.resolution == gt.resolution):
        raise InvalidArgument("fields must share a resolution")
    return relmse(reconstruct(before, model).values, gt.values) - relmse(reconstruct(after, model).values, gt.values)


# --------------------------------------------------------------------------- value maps


@dataclass
class ActionValueMap:
    """Per-block action values; ``-inf`` marks invalid actions."""

    block_id: int
    resample: float
    leaves: np.ndarray
    refine: np.ndarray

    def best(self):
        """``(value, action)`` with ties resolved toward Resample, then the
        lowest leaf id."""
        best_v, best_a = self.resample, SamplingAction("resample", self.block_id)
        if len(self.refine):
            k = int(np.argmax(self.refine))  # first max = lowest leaf id (leaves sorted)
            if self.refine[k] > best_v:
                best_v, best_a = float(self.refine[k]), SamplingAction("refine", self.block_id, int(self.leaves[k]))
        return best_v, best_a

    def scaled(self, c):
        return ActionValueMap(self.block_id, self.resample * c, self.leaves, self.refine * c)

    def valid_actions(self):
        out = []
        if self.resample > MASKED:
            out.append(SamplingAction("resample", self.block_id))
        out += [SamplingAction("refine", self.block_id, int(l)) for l, v in zip(self.leaves, self.refine) if v > MASKED]
        return out

    def mask_cost(self, block: BlockState, remaining):
        if resample_cost(block) > remaining:
            self.resample = MASKED
        if remaining < 1:
            self.refine = np.full_like(self.refine, MASKED)
        return self


REFINE_MIN_COUNT = 4.0


def _refinable(tree: DirTree, min_count: float | None = None):
    """Leaves and a mask of those that may be refined: below max depth and
    holding at least ``min_count`` samples (a split needs evidence)."""
    lv = tree.leaves()
    mc = REFINE_MIN_COUNT if min_count is None else min_count
    ok = (tree.node_depth(lv) < tree.max_depth) & (tree.count[lv] >= mc)
    return lv, ok


@dataclass
class HeuristicConfig:
    refine_weight: float = 0.02
    prior_rel_var: float = 1.0


def heuristic_payoff(block: BlockState, config: HeuristicConfig | None = None) -> ActionValueMap:
    """Hand-built value estimate.

    Resample: expected relMSE drop per sample, i.e. half the mean relative
    variance of the leaf means divided by the block's sample count.
    Refine: leaf's share of the block's luminance-weighted solid angle times
    its remaining depth, times ``refine_weight``.
    """
    cfg = config or HeuristicConfig()
    tree = block.tree
    lv, ok = _refinable(tree)
    n = block.n_samples
    if n == 0:
        return ActionValueMap(block.block_id, MUST_SAMPLE, lv, np.where(ok, 0.0, MASKED))
    c = tree.count[lv]
    lum = luminance(tree.mean[lv])
    lvar = luminance(tree.variance(lv))
    rel = np.where(c > 1, lvar / (lum * lum + DELTA), cfg.prior_rel_var)
    rel_mean_var = rel / np.maximum(c, 1.0)
    v_res = 0.5 * float(rel_mean_var.mean()) / n
    energy = lum * tree.solid_angle(lv)
    share = energy / energy.sum() if energy.sum() > 0 else np.full(len(lv), 1.0 / len(lv))
    deficit = (tree.max_depth - tree.node_depth(lv)) / tree.max_depth
    v_ref = cfg.refine_weight * share * deficit
    return ActionValueMap(block.block_id, v_res, lv, np.where(ok, v_ref, MASKED))


# --------------------------------------------------------------------------- features / Q


def canonical_depth(tree: DirTree):
    return min(tree.init_depth + 1, tree.max_depth)


def feature_length(max_depth=5, init_depth=2):
    dc = min(init_depth + 1, max_depth)
    return 2 + 4 * 4 ** dc + (max_depth + 1)


def _log_value(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.log(np.maximum(np.where(np.isfinite(v), v, 0.0), 0.0) + 1e-12) / 10.0
    return np.where(np.isposinf(v), 1.0, out)


def block_features(block: BlockState):
    """Fixed-length, scale-normalized summary of a block's tree.

    ``[log1p(total count), hand-built Resample value, per canonical cell
    (count share, mean luminance / block scale, relative variance),
    leaf-depth histogram / n_leaves, per canonical cell hand-built Refine
    value]``.  Hand-built values enter on a log scale.
    """
    tree = block.tree
    dc = canonical_depth(tree)
    fine = tree_to_dense(tree, 1 << tree.max_depth, block.block_id)
    side = 1 << dc
    f = (1 << tree.max_depth) // side
    cnt = fine.counts.reshape(side, f, side, f).sum(axis=(1, 3))
    lum = luminance(fine.values).reshape(side, f, side, f).mean(axis=(1, 3))
    var = luminance(fine.variance).reshape(side, f, side, f).mean(axis=(1, 3))
    total = cnt.sum()
    s = max(float((lum * cnt).sum() / total), 1e-3) if total > 0 else 1.0
    share = cnt / total if total > 0 else np.zeros_like(cnt)
    rel = np.minimum(var / (lum * lum + DELTA), 100.0)
    hist = tree.depth_histogram() / tree.n_leaves
    hv = heuristic_payoff(block)
    hres = _log_value(hv.resample)
    href = np.full(side * side, _log_value(0.0))
    for ix, val in zip(_leaf_outputs(tree, hv.leaves), _log_value(hv.refine)):
        for i in ix:
            href[i - 1] = max(href[i - 1], val)
    v = np.concatenate([[np.log1p(block.n_samples), hres], share.ravel(), (lum / s).ravel(), np.log1p(rel).ravel(),
                        hist, href])
    return v


def _leaf_outputs(tree: DirTree, leaves):
    """Canonical-cell output indices (offset by 1 for Resample) per leaf."""
    dc = canonical_depth(tree)
    side = 1 << dc
    out = []
    for lf in leaves:
        d, iy, ix = tree.node_cell(int(lf))
        if d >= dc:
            k = 1 << (d - dc)
            out.append([1 + (iy // k) * side + ix // k])
        else:
            k = 1 << (dc - d)
            out.append([1 + (iy * k + a) * side + ix * k + b for a in range(k) for b in range(k)])
    return out


def symlog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(y):
    return np.sign(y) * np.expm1(np.abs(y))


@dataclass
class QModel:
    """Q network and the scale of its targets.

    The network regresses ``symlog(gain / reward_scale)``; per-cost gains span
    several orders of magnitude and only their order matters to the loop.
    """

    net: nn.Network
    max_depth: int
    init_depth: int
    reward_scale: float = 1.0
    history: list = field(default_factory=list)

    def meta(self):
        return json.dumps({"model": "Q", "max_depth": self.max_depth, "init_depth": self.init_depth,
                           "reward_scale": self.reward_scale})


def make_q_model(max_depth, init_depth, rng: Rng, hidden=(64, 64)) -> QModel:
    nf = feature_length(max_depth, init_depth)
    dc = min(init_depth + 1, max_depth)
    net = nn.mlp([nf, *hidden, 1 + 4 ** dc], rng, zero_last=True)
    return QModel(net, max_depth, init_depth)


def predict_payoff(features, model: QModel, block: BlockState | None = None) -> ActionValueMap:
    """Learned value map. With ``block`` given, refine values are mapped onto
    the block's actual leaves and invalid actions are masked."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape != (model.net.layers[0].shape_in,):
        raise InvalidArgument(f"feature length {f.shape} != {model.net.layers[0].shape_in}")
    out = symexp(nn.predict(model.net, f[None])[0]) * model.reward_scale
    if block is None:
        dc = min(model.init_depth + 1, model.max_depth)
        return ActionValueMap(-1, float(out[0]), np.arange(4 ** dc), out[1:].copy())
    tree = block.tree
    lv, ok = _refinable(tree)
    idx = _leaf_outputs(tree, lv)
    ref = np.array([out[i].mean() for i in idx])
    if block.n_samples == 0:
        return ActionValueMap(block.block_id, MUST_SAMPLE, lv, np.where(ok, ref, MASKED))
    return ActionValueMap(block.block_id, float(out[0]), lv, np.where(ok, ref, MASKED))


# --------------------------------------------------------------------------- Q training


@dataclass
class QConfig:
    episodes: int = 40
    steps: int = 24
    budget: int = 256
    eps_start: float = 0.5
    eps_end: float = 0.05
    buffer_size: int = 10_000
    batch: int = 64
    updates_per_episode: int = 40
    lr: float = 1e-3
    gamma: float = 0.0  # one-step targets; kept for interface completeness
    seed: int = 0
    val_fraction: float = 0.2
    max_trace_depth: int = 5
    lookahead: int = 256
    hidden: tuple = (64, 64)


@dataclass
class QTask:
    """A training block: scene, its representative points and ground truth."""

    scene: object
    points: object
    gt: DenseField
    block_id: int = 0


class ReplayBuffer:
    def __init__(self, size, n_features):
        self.size = size
        self.f = np.zeros((size, n_features))
        self.idx = [None] * size
        self.r = np.zeros(size)
        self.n = 0
        self.head = 0

    def add(self, f, out_idx, r):
        self.f[self.head] = f
        self.idx[self.head] = out_idx
        self.r[self.head] = r
        self.head = (self.head + 1) % self.size
        self.n = min(self.n + 1, self.size)

    def sample(self, k, rng: Rng):
        sel = rng.integers(0, self.n, size=min(k, self.n))
        return self.f[sel], [self.idx[i] for i in sel], self.r[sel]


def _q_loss(model: QModel, f, idx, target, grad=True):
    out, cache = nn.forward(model.net, f)
    pred = np.array([out[i, ix].mean() for i, ix in enumerate(idx)])
    diff = pred - target
    loss = float(np.mean(diff ** 2))
    if not grad:
        return loss, None
    g = np.zeros_like(out)
    for i, ix in enumerate(idx):
        g[i, ix] += 2.0 * diff[i] / (len(ix) * len(idx))
    grads, _ = nn.backward(model.net, cache, g)
    return loss, grads


def select_action(vm: ActionValueMap, eps: float, rng: Rng):
    """Epsilon-greedy over valid actions (uniform when exploring)."""
    valid = vm.valid_actions()
    if not valid:
        return None
    if rng.random() < eps:
        return valid[int(rng.integers(0, len(valid)))]
    return vm.best()[1]


def _draw(block: BlockState, scene, rng: Rng, n: int, max_trace_depth: int):
    """Deposit ``n`` leaf-uniform samples into ``block`` (a lookahead batch)."""
    from .tracer import incident_radiance_at

    dirs, _ = block.tree.sample_uniform_leaves(n, rng)
    pick = rng.integers(0, len(block.points), size=n)
    L = incident_radiance_at(scene, block.points.position[pick], block.points.normal[pick], dirs, rng,
                             max_trace_depth)
    block.tree.deposit_many(dirs, L)


def realized_gain(block: BlockState, action: SamplingAction, gt: DenseField, scene, rng: Rng,
                  r_model: RModel | None, res: int, max_trace_depth=5, reward_fn=None, lookahead: int = 256):
    """Per-cost benefit of ``action`` on a copy of ``block`` and the new state.

    Refine is scored by the gain of refine plus a lookahead batch over the
    same batch without the refine; both branches draw the same random
    numbers.  The batch has ``lookahead`` samples.
    """
    fn = reward_fn or (lambda b, a, g: compute_reward(b, a, g, r_model))
    before = tree_to_dense(block.tree, res, block.block_id)
    new = block.copy()
    if action.kind == "resample":
        resample(new, scene, rng, max_trace_depth)
        gain = fn(before, tree_to_dense(new.tree, res, block.block_id), gt)
        return gain / resample_cost(block), new
    new.tree.refine(action.leaf)
    key = int(rng.integers(0, 2 ** 62))
    m = max(1, lookahead)
    ref_branch = new.copy()
    plain = block.copy()
    if len(block.points):
        _draw(ref_branch, scene, Rng(key), m, max_trace_depth)
        _draw(plain, scene, Rng(key), m, max_trace_depth)
    after_ref = tree_to_dense(ref_branch.tree, res, block.block_id)
    after_plain = tree_to_dense(plain.tree, res, block.block_id)
    gain = fn(before, after_ref, gt) - fn(before, after_plain, gt)
    return gain, new


def _rollout(task: QTask, model: QModel, eps: float, rng: Rng, cfg: QConfig, r_model, reward_fn, res):
    """One epsilon-greedy episode; returns ``(features, output ids, realized gain)`` per step."""
    max_depth, init_depth = model.max_depth, model.init_depth
    block = BlockState(task.block_id, 0, 0, DirTree(max_depth, init_depth), task.points)
    resample(block, task.scene, rng, cfg.max_trace_depth)
    spent, out = 0, []
    for _ in range(cfg.steps):
        f = block_features(block)
        vm = predict_payoff(f, model, block).mask_cost(block, cfg.budget - spent)
        a = select_action(vm, eps, rng)
        if a is None:
            break
        gain, new = realized_gain(block, a, task.gt, task.scene, rng, r_model, res, cfg.max_trace_depth,
                                  reward_fn, cfg.lookahead)
        out.append((f, [0] if a.kind == "resample" else _leaf_outputs(block.tree, [a.leaf])[0], gain))
        spent += action_cost_block(block, a)
        block = new
    return out


def train_q(tasks, r_model: RModel | None, config: QConfig | None = None, *, require_r: bool = True,
            reward_fn=None, log_csv=None) -> QModel:
    """Fit Q to realized per-cost gains from epsilon-greedy rollouts.

    The R model must be trained first (pass ``require_r=False`` to use the
    baseline reconstructor, e.g. in tests).
    """
    cfg = config or QConfig()
    if r_model is None and require_r:
        raise InvalidState("train_q needs a trained R model; run train-r first")
    if not tasks:
        raise InvalidArgument("no training tasks")
    res = tasks[0].gt.resolution
    max_depth = int(np.log2(res))
    init_depth = min(2, max_depth)
    rng = Rng(cfg.seed, 13)
    model = make_q_model(max_depth, init_depth, rng.derive(1), cfg.hidden)
    nf = feature_length(max_depth, init_depth)
    buf = ReplayBuffer(cfg.buffer_size, nf)
    n_val = max(1, int(round(len(tasks) * cfg.val_fraction))) if len(tasks) > 1 else 0
    # validation tasks are spread over the list so every scene family is
    # represented; their transitions come from exploratory (eps = 1) rollouts
    # collected once, so checkpoint selection compares like with like
    val_ids = set(np.linspace(0, len(tasks) - 1, n_val).round().astype(int).tolist()) if n_val else set()
    train_ids = [i for i in range(len(tasks)) if i not in val_ids]
    val = []
    for k, ti in enumerate(sorted(val_ids)):
        val += _rollout(tasks[ti], model, 1.0, rng.derive(50 + k), cfg, r_model, reward_fn, res)
    state = nn.AdamState.zeros_like(model.net)
    best, best_net = np.inf, model.net.copy()
    hist = []
    scale = None
    for ep in range(cfg.episodes):
        eps = cfg.eps_start + (cfg.eps_end - cfg.eps_start) * ep / max(cfg.episodes - 1, 1)
        task = tasks[train_ids[ep % len(train_ids)]]
        for f, idx, gain in _rollout(task, model, eps, rng.derive(100 + ep), cfg, r_model, reward_fn, res):
            buf.add(f, idx, gain)
        if buf.n == 0:
            continue
        if scale is None or ep < 3:
            nz = np.abs(buf.r[:buf.n])
            nz = nz[nz > 0]
            scale = max(float(np.median(nz)), 1e-12) if nz.size else 1.0
            model.reward_scale = scale
        for _ in range(cfg.updates_per_episode):
            f, idx, r = buf.sample(cfg.batch, rng)
            loss, grads = _q_loss(model, f, idx, symlog(r / scale))
            nn.adam_step(model.net, grads, state, lr=cfg.lr)
        if val:
            vf = np.stack([v[0] for v in val])
            vr = symlog(np.array([v[2] for v in val]) / scale)
            vl = _q_loss(model, vf, [v[1] for v in val], vr, grad=False)[0]
        else:
            f, idx, r = buf.f[:buf.n], buf.idx[:buf.n], buf.r[:buf.n]
            vl = _q_loss(model, f, idx, symlog(r / scale), grad=False)[0]
        hist.append((ep + 1, float(loss), float(vl)))
        if vl < best:
            best, best_net = vl, model.net.copy()
    if log_csv is not None:
        write_training_log(log_csv, hist)
    return QModel(best_net, max_depth, init_depth, model.reward_scale, hist)


def action_cost_block(block: BlockState, action: SamplingAction) -> int:
    return 1 if action.kind == "refine" else resample_cost(block)


def save_model(model, path):
    nn.save(model.net, path, model.meta())


def load_model(path):
    net, meta = nn.load(path)
    m = json.loads(meta)
    if m.get("model") == "R":
        return RModel(net, int(m["resolution"]))
    if m.get("model") == "Q":
        return QModel(net, int(m["max_depth"]), int(m["init_depth"]), float(m["reward_scale"]))
    raise InvalidArgument(f"checkpoint has no model tag: {meta!r}")
