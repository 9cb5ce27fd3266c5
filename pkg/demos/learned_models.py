"""Train a small R reconstructor and Q value model on procedural blocks, then
compare heuristic, learned and uniform sample allocation on unseen blocks.

Takes a few minutes on one core.  With this small R and only ten test blocks
the ordering varies; the acceptance suite runs the larger protocol.
"""
import numpy as np

from lfguide import field as fld, models, scenes
from lfguide.core import Rng, relmse
from lfguide.guide import adaptive_loop, uniform_allocation
from lfguide.tracer import bake_ground_truth

RES, BUDGET = 16, 5000


def blocks(seed, spc):
    out = []
    for name in scenes.DATASET_TEMPLATES:
        sc = scenes.make_template(name, seed=seed, res=32)
        for b in fld.init_blocks(32, 32, 16, 2, 4).attach(sc).blocks:
            if not b.is_empty:
                out.append((sc, b, bake_ground_truth(sc, b.points, RES, spc, Rng(1, seed, b.block_id))))
    return out


def fresh(b):
    return fld.BlockState(0, b.x0, b.y0, fld.DirTree(4, 2), b.points)


def main():
    train = blocks(0, 256)
    examples = []
    for i, (sc, b, gt) in enumerate(train):
        for n in (16, 64, 256, 1300, 5000):
            bs = fresh(b)
            uniform_allocation(bs, sc, n, Rng(2, i, n))
            examples.append(models.TrainingExample(fld.tree_to_dense(bs.tree, RES), gt))
    rm = models.train_r(examples, models.RConfig(epochs=30, width=16, layers=3, lr=2e-3))
    print(f"R trained on {len(examples)} fields")
    qm = models.train_q([models.QTask(sc, b.points, gt) for sc, b, gt in train], rm,
                        models.QConfig(episodes=40, steps=60, budget=BUDGET))
    print("Q trained")

    err = {"heuristic": [], "learned": [], "uniform": []}
    for i, (sc, b, gt) in enumerate(blocks(1000, 1024)[:10]):
        for est in ("heuristic", "learned"):
            g = fld.BlockGrid(32, 32, 16, 1, 1, [fresh(b)])
            adaptive_loop(sc, g, est, BUDGET, Rng(2, i), q_model=qm)
            err[est].append(relmse(models.reconstruct(fld.tree_to_dense(g.blocks[0].tree, RES), rm).values, gt.values))
        bs = fresh(b)
        uniform_allocation(bs, sc, BUDGET, Rng(2, i))
        err["uniform"].append(relmse(models.reconstruct(fld.tree_to_dense(bs.tree, RES), rm).values, gt.values))
    for k, v in err.items():
        print(f"{k:<10} mean field relMSE {np.mean(v):.4f}")


if __name__ == "__main__":
    main()
