import numpy as np
import pytest
from hypothesis import settings

from lfguide import scenes
from lfguide.core import Rng
from lfguide.field import BlockState, DirTree, init_blocks
from lfguide.guide import uniform_allocation
from lfguide.field import tree_to_dense
from lfguide.tracer import bake_ground_truth

settings.register_profile("default", deadline=None)
settings.load_profile("default")


def one_block(template, seed, res=16):
    """Scene rendered at ``res`` pixels with a single block covering it."""
    sc = scenes.make_template(template, seed=seed, res=res)
    grid = init_blocks(res, res, res, 2, 4).attach(sc)
    return sc, grid.blocks[0]


def fresh(block, max_depth=4, init_depth=2):
    return BlockState(block.block_id, block.x0, block.y0, DirTree(max_depth, init_depth), block.points)


@pytest.fixture(scope="session")
def baked_pairs():
    """(sparse, gt) pairs at R=8 over 56 procedural blocks; sparse fields
    hold 64 uniformly allocated samples."""
    out = []
    for seed in range(7):
        for name in scenes.DATASET_TEMPLATES:
            sc, b = one_block(name, seed)
            if len(b.points) == 0:
                continue
            gt = bake_ground_truth(sc, b.points, 8, 16, Rng(90, seed, len(out)))
            s = fresh(b, 3, 2)
            uniform_allocation(s, sc, 64, Rng(91, seed, len(out)))
            out.append((tree_to_dense(s.tree, 8), gt))
    return out


@pytest.fixture
def rng():
    return Rng(12345)


def assert_finite(a):
    assert np.all(np.isfinite(a))


# acceptance criteria report one line each in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def ac_report():
    def report(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
