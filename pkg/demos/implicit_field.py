"""Explicit quadtree vs implicit coordinate network on the same samples."""
import sys

from lfguide import scenes
from lfguide.implicit import CompareConfig, ImplicitConfig, compare_representations, write_comparison

name = sys.argv[1] if len(sys.argv) > 1 else "small_light"
sc = scenes.make_template(name, res=32)
rows = compare_representations(sc, 4096, CompareConfig(block_size=16, max_depth=4, gt_spp=64, spp=16,
                                                       reference_spp=256, implicit=ImplicitConfig(epochs=60)))
print(write_comparison(rows, scene_name=name), end="")
