"""Render the cornell box unguided and with heuristic-driven guiding at equal
sample budget and print relMSE against a high-spp reference.

    python3 demos/guided_vs_unguided.py [--res 32] [--out demo_out]
"""
import argparse
from pathlib import Path

from lfguide import imageio, scenes
from lfguide.core import Rng
from lfguide.guide import RenderConfig, compare_estimators, write_metrics_csv
from lfguide.tracer import render


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scene", default="cornell")
    ap.add_argument("--res", type=int, default=32)
    ap.add_argument("--out", default="demo_out")
    a = ap.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = scenes.make_template(a.scene, res=a.res)
    ref, _ = render(sc, 1024, Rng(99))
    imageio.write_png(ref, out / "reference.png")
    cfg = RenderConfig(block_size=16, max_depth=5, budget=8 * a.res * a.res, spp=16)
    rows = compare_estimators(sc, cfg, ref, estimators=("none", "heuristic"))
    write_metrics_csv(out / "metrics.csv", rows)
    for r in rows:
        print(f"{r['estimator']:<10} spp-equivalent {r['spp_equivalent']:6.2f}  relMSE {r['relmse']:.4f}")


if __name__ == "__main__":
    main()
