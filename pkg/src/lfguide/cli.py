"""``lfguide`` command-line entry point.

Every subcommand takes ``--config FILE`` plus flat ``--<field> VALUE``
overrides for any :class:`~lfguide.config.RunConfig` field. Exit codes:
0 success, 1 threshold failure, 2 usage or configuration error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset, field as fld, guide, imageio, implicit, models
from .config import MODES, ConfigError, RunConfig, _suggest, parse_config
from .core import InvalidArgument, InvalidState, Rng, relmse
from .scenes import load_scene, make_template
from .tracer import bake_ground_truth, render

log = logging.getLogger("lfguide")

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
_SKIP_FLAGS = {"mode", "thresholds"}


class ThresholdFailure(Exception):
    pass


def _scene(cfg: RunConfig):
    scene = load_scene(cfg.scene)
    if cfg.width or cfg.height:
        w = cfg.width or scene.camera.width
        h = cfg.height or scene.camera.height
        scene.camera = dataclasses.replace(scene.camera, width=w, height=h)
    return scene


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_ckpt(path):
    return models.load_model(path) if path else None


def _render_config(cfg: RunConfig, estimator=None) -> guide.RenderConfig:
    return guide.RenderConfig(block_size=cfg.block_size, init_depth=cfg.init_depth, max_depth=cfg.max_depth,
                              budget=cfg.budget, estimator=estimator or cfg.estimator, alpha=cfg.alpha,
                              eps_floor=cfg.eps_floor, spp=cfg.spp, seed=cfg.seed,
                              max_trace_depth=cfg.max_trace_depth, batch_k=cfg.batch_k,
                              r_model=_load_ckpt(cfg.r_checkpoint), q_model=_load_ckpt(cfg.q_checkpoint))


def _reference(cfg: RunConfig):
    return imageio.read_pfm(cfg.reference).astype(np.float64) if cfg.reference else None


# --------------------------------------------------------------------------- commands


def cmd_render(cfg: RunConfig):
    scene = _scene(cfg)
    out = _out(cfg)
    res = guide.render_guided(scene, _render_config(cfg), _reference(cfg))
    imageio.write_pfm(res.image, out / "image.pfm")
    imageio.write_png(res.image, out / "image.png")
    guide.write_metrics_csv(out / "metrics.csv", [res.metrics])
    if res.action_log:
        guide.write_action_log(out / "actions.log", res.action_log)
    print(f"rendered {scene.name} {scene.camera.width}x{scene.camera.height} "
          f"spp_equivalent={res.metrics['spp_equivalent']:.3f}")


def cmd_bake(cfg: RunConfig):
    """Ground-truth fields per block plus an unguided reference image."""
    scene = _scene(cfg)
    out = _out(cfg)
    cam = scene.camera
    grid = fld.init_blocks(cam.width, cam.height, cfg.block_size, cfg.init_depth, cfg.max_depth).attach(scene)
    rng = Rng(cfg.seed, 31)
    for b in grid.blocks:
        gt = bake_ground_truth(scene, b.points, cfg.resolution, cfg.gt_spp, rng.derive(b.block_id), b.block_id,
                               cfg.max_trace_depth)
        fld.save(gt, out / f"gt_b{b.block_id}_r{cfg.resolution}.lfgb")
    img, _ = render(scene, cfg.reference_spp, Rng(cfg.seed, 32), max_depth=cfg.max_trace_depth)
    imageio.write_pfm(img, out / "reference.pfm")
    print(f"baked {len(grid.blocks)} blocks at R={cfg.resolution}; reference at {cfg.reference_spp} spp")


def cmd_train_r(cfg: RunConfig):
    out = _out(cfg)
    examples = dataset.load_examples(cfg.dataset_dir, cfg.resolution)
    rm = models.train_r(examples, models.RConfig(epochs=cfg.epochs, seed=cfg.seed), log_csv=out / "r_train.csv")
    models.save_model(rm, out / "r.lfgn")
    print(f"trained R on {len(examples)} examples; best val loss {min(h[2] for h in rm.history):.5g}")


def q_tasks(cfg: RunConfig):
    """Training blocks for Q: every non-empty block of each (template, seed)."""
    tasks = []
    d = int(np.log2(cfg.resolution))
    for name in cfg.templates:
        for seed in cfg.seeds:
            scene = make_template(name, seed=seed, res=cfg.width or 32)
            grid = fld.init_blocks(scene.camera.width, scene.camera.height, cfg.block_size,
                                   min(cfg.init_depth, d), d).attach(scene)
            for b in grid.blocks:
                if b.is_empty:
                    continue
                gt = bake_ground_truth(scene, b.points, cfg.resolution, cfg.gt_spp,
                                       Rng(cfg.seed, 41, seed, b.block_id), b.block_id, cfg.max_trace_depth)
                tasks.append(models.QTask(scene, b.points, gt, 0))
    return tasks


def cmd_train_q(cfg: RunConfig):
    out = _out(cfg)
    rm = models.load_model(cfg.r_checkpoint)
    tasks = q_tasks(cfg)
    qc = models.QConfig(episodes=cfg.episodes, steps=cfg.q_steps, budget=cfg.q_budget, seed=cfg.seed,
                        max_trace_depth=cfg.max_trace_depth)
    qm = models.train_q(tasks, rm, qc, log_csv=out / "q_train.csv")
    models.save_model(qm, out / "q.lfgn")
    print(f"trained Q on {len(tasks)} blocks, {cfg.episodes} episodes")


def _loop_grid(cfg: RunConfig, scene, rng):
    cam = scene.camera
    grid = fld.init_blocks(cam.width, cam.height, cfg.block_size, cfg.init_depth, cfg.max_depth).attach(scene)
    guide.adaptive_loop(scene, grid, "heuristic", cfg.budget, rng, max_trace_depth=cfg.max_trace_depth)
    return grid


def cmd_fit_implicit(cfg: RunConfig):
    scene = _scene(cfg)
    out = _out(cfg)
    grid = _loop_grid(cfg, scene, Rng(cfg.seed, 51))
    icfg = implicit.ImplicitConfig(epochs=cfg.implicit_epochs, seed=cfg.seed, resolution=cfg.resolution)
    f, rep = implicit.fit_implicit(implicit.samples_from_grid(grid), icfg)
    implicit.save(f, out / "implicit.lfgn")
    with open(out / "implicit_fit.csv", "w") as fh:
        fh.write("epoch,loss,val_loss\n")
        for row in rep.history:
            fh.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row) + "\n")
    print(f"fitted implicit field: val relMSE {rep.val_relmse:.5g} (best epoch {rep.best_epoch})")


def cmd_compare(cfg: RunConfig):
    scene = _scene(cfg)
    out = _out(cfg)
    cc = implicit.CompareConfig(block_size=cfg.block_size, init_depth=cfg.init_depth, max_depth=cfg.max_depth,
                                gt_spp=cfg.gt_spp, spp=cfg.spp, reference_spp=cfg.reference_spp, alpha=cfg.alpha,
                                eps_floor=cfg.eps_floor, seed=cfg.seed, max_trace_depth=cfg.max_trace_depth,
                                r_model=_load_ckpt(cfg.r_checkpoint),
                                implicit=implicit.ImplicitConfig(epochs=cfg.implicit_epochs, seed=cfg.seed))
    rows = implicit.compare_representations(scene, cfg.budget, cc, _reference(cfg))
    print(implicit.write_comparison(rows, out / "compare.csv", out / "compare.txt", scene.name), end="")


def check_thresholds(rows, thresholds: dict):
    """Threshold keys: ``relmse`` bounds every row, ``<estimator>`` bounds one
    row's relMSE. Returns a list of (key, value, limit, ok)."""
    res = []
    for key, limit in sorted(thresholds.items()):
        sel = rows if key == "relmse" else [r for r in rows if r.get("estimator") == key]
        if not sel:
            raise ConfigError(f"threshold {key!r} matches no metrics row")
        worst = max(float(r["relmse"]) for r in sel)
        res.append((key, worst, float(limit), worst <= float(limit)))
    return res


def run_eval(cfg: RunConfig):
    """Write ``metrics.csv`` and return the threshold verdicts."""
    if not cfg.reference:
        raise InvalidState("eval needs a reference image (run bake, then pass --reference)")
    ref = _reference(cfg)
    out = _out(cfg)
    if cfg.image:
        img = imageio.read_pfm(cfg.image).astype(np.float64)
        rows = [{"scene": Path(cfg.image).stem, "estimator": "image", "budget": 0, "spp_equivalent": "",
                 "relmse": relmse(img, ref), "wall_time": 0.0}]
    else:
        scene = _scene(cfg)
        rc = _render_config(cfg)
        ests = ["none", "heuristic"] + (["learned"] if rc.q_model is not None and rc.r_model is not None else [])
        rows = guide.compare_estimators(scene, rc, ref, ests)
    guide.write_metrics_csv(out / "metrics.csv", rows)
    for r in rows:
        print(f"{r['estimator']:<10} budget={r['budget']} relMSE={r['relmse']:.6g}")
    verdicts = check_thresholds(rows, cfg.thresholds)
    for key, v, lim, ok in verdicts:
        print(f"threshold {key}: {v:.6g} <= {lim:.6g} {'PASS' if ok else 'FAIL'}")
    return rows, verdicts


def cmd_eval(cfg: RunConfig):
    _, verdicts = run_eval(cfg)
    if not all(ok for *_, ok in verdicts):
        raise ThresholdFailure("threshold check failed")


def cmd_dataset_gen(cfg: RunConfig):
    m = dataset.generate_dataset(cfg)
    n_sparse = sum(e["kind"] == "sparse" for e in m["entries"])
    print(f"wrote {len(m['entries'])} files ({n_sparse} sparse) to {cfg.dataset_dir}")


COMMANDS = {
    "render": cmd_render, "bake": cmd_bake, "train-r": cmd_train_r, "train-q": cmd_train_q,
    "fit-implicit": cmd_fit_implicit, "compare": cmd_compare, "eval": cmd_eval, "dataset-gen": cmd_dataset_gen,
}


# --------------------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="lfguide", description="Adaptive light-field sampling and path guiding.")
    sub = p.add_subparsers(dest="mode", required=True, parser_class=_Parser)
    for mode in MODES:
        sp = sub.add_parser(mode)
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("-v", "--verbose", action="store_true")
        for f in dataclasses.fields(RunConfig):
            if f.name in _SKIP_FLAGS:
                continue
            sp.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="V")
    return p


def main(argv=None) -> int:
    try:
        args, unknown = build_parser().parse_known_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if unknown:
        flag = next((u for u in unknown if u.startswith("--")), unknown[0])
        key = flag.lstrip("-").split("=")[0].replace("-", "_")
        print(f"lfguide: error: unknown option {flag!r}{_suggest(key)}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    try:
        cfg = parse_config(args.config, overrides)
    except (InvalidArgument, InvalidState) as e:
        print(f"lfguide: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=cfg.threads):
            COMMANDS[cfg.mode](cfg)
    except ThresholdFailure as e:
        print(f"lfguide: {e}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (InvalidArgument, InvalidState) as e:
        print(f"lfguide: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"lfguide: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
