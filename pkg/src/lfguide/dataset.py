"""Training-set generation for the reconstructor.

For every (template, seed) the scene is split into blocks. Each block gets
a ground-truth field at every resolution of the ladder and one sparse field
per (spp level, resolution). A sparse field at level ``L`` holds
``L * 4**init_depth`` uniformly drawn samples, binned onto a uniform tree
whose leaves match the target resolution.

Files use the field module's LFGB container. ``manifest.json`` lists every
file with its sha256 and the parameters needed to regenerate it.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import zlib
from pathlib import Path

import numpy as np

from . import field as fld
from .core import InvalidArgument, Rng
from .models import TrainingExample
from .scenes import make_template
from .tracer import bake_ground_truth, incident_radiance_at

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class DatasetIOError(OSError):
    """Dataset directory could not be written; partial outputs are removed."""


def _tag(name: str) -> int:
    return zlib.crc32(name.encode())


def _params(cfg) -> dict:
    return {
        "seed": int(cfg.seed),
        "image": int(cfg.width or 32),
        "block_size": int(cfg.block_size),
        "init_depth": int(cfg.init_depth),
        "gt_spp": int(cfg.gt_spp),
        "max_trace_depth": int(cfg.max_trace_depth),
        "templates": list(cfg.templates),
        "seeds": [int(s) for s in cfg.seeds],
        "spp_levels": [int(s) for s in cfg.spp_levels],
        "resolutions": [int(r) for r in cfg.resolutions],
    }


def _blocks(template: str, seed: int, p: dict):
    scene = make_template(template, seed=seed, res=p["image"])
    grid = fld.init_blocks(p["image"], p["image"], p["block_size"], p["init_depth"], p["init_depth"]).attach(scene)
    return scene, grid


def sparse_field(scene, block, level: int, res: int, p: dict) -> fld.DenseField:
    """Sparse field of ``block`` at spp ``level`` binned at resolution ``res``.

    The samples depend only on (template, seed, block, level), so every
    resolution of one level bins the same records."""
    n = int(level) * 4 ** p["init_depth"]
    rng = Rng(p["seed"], 2, _tag(scene.name), p["_scene_seed"], block.block_id, int(level))
    dirs, _ = fld.DirTree(p["init_depth"], p["init_depth"]).sample_uniform_leaves(n, rng)
    pick = rng.integers(0, len(block.points), size=n)
    L = incident_radiance_at(scene, block.points.position[pick], block.points.normal[pick], dirs, rng,
                             p["max_trace_depth"])
    d = int(np.log2(res))
    tree = fld.DirTree(d, d)
    tree.deposit_many(dirs, L)
    return fld.tree_to_dense(tree, res, block.block_id)


def gt_field(scene, block, res: int, p: dict) -> fld.DenseField:
    rng = Rng(p["seed"], 1, _tag(scene.name), p["_scene_seed"], block.block_id, int(res))
    return bake_ground_truth(scene, block.points, res, p["gt_spp"], rng, block.block_id, p["max_trace_depth"])


def _entry_bytes(entry: dict, p: dict, cache=None) -> bytes:
    key = (entry["template"], entry["seed"])
    if cache is not None and key in cache:
        scene, grid = cache[key]
    else:
        scene, grid = _blocks(entry["template"], entry["seed"], p)
        if cache is not None:
            cache.clear()
            cache[key] = (scene, grid)
    block = grid.blocks[entry["block"]]
    q = {**p, "_scene_seed": entry["seed"]}
    if entry["kind"] == "gt":
        return fld.dense_to_bytes(gt_field(scene, block, entry["resolution"], q))
    return fld.dense_to_bytes(sparse_field(scene, block, entry["spp_level"], entry["resolution"], q))


def _plan(p: dict):
    for template in p["templates"]:
        for seed in p["seeds"]:
            _, grid = _blocks(template, seed, p)
            for b in grid.blocks:
                if b.is_empty:
                    continue
                base = f"{template}_s{seed}_b{b.block_id}"
                for r in p["resolutions"]:
                    yield {"kind": "gt", "template": template, "seed": seed, "block": b.block_id,
                           "spp_level": None, "resolution": r, "path": f"{base}_gt_r{r}.lfgb"}
                for lvl in p["spp_levels"]:
                    for r in p["resolutions"]:
                        yield {"kind": "sparse", "template": template, "seed": seed, "block": b.block_id,
                               "spp_level": lvl, "resolution": r, "path": f"{base}_l{lvl}_r{r}.lfgb"}


def generate_dataset(cfg, out_dir=None) -> dict:
    """Write the dataset into ``out_dir`` (default ``cfg.dataset_dir``) and
    return the manifest. On any write failure the files created by this
    call are removed and :class:`DatasetIOError` is raised."""
    out = Path(out_dir or cfg.dataset_dir)
    p = _params(cfg)
    for r in p["resolutions"]:
        if r < 2 or r & (r - 1):
            raise InvalidArgument(f"resolution {r} is not a power of two")
    created_dir = not out.exists()
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries, cache = [], {}
        for e in _plan(p):
            buf = _entry_bytes(e, p, cache)
            path = out / e["path"]
            with open(path, "wb") as f:
                written.append(path)
                f.write(buf)
            e["sha256"] = hashlib.sha256(buf).hexdigest()
            entries.append(e)
        manifest = {"version": MANIFEST_VERSION, "params": p, "entries": entries}
        mpath = out / MANIFEST
        written.append(mpath)
        mpath.write_text(json.dumps(manifest, indent=1))
    except OSError as e:
        for w in written:
            try:
                os.remove(w)
            except OSError:
                pass
        if created_dir:
            shutil.rmtree(out, ignore_errors=True)
        raise DatasetIOError(f"cannot write dataset to {out}: {e}") from e
    return manifest


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / MANIFEST
    try:
        m = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetIOError(f"no manifest in {dataset_dir}") from None
    if m.get("version") != MANIFEST_VERSION:
        raise InvalidArgument(f"unsupported manifest version {m.get('version')}")
    return m


def rebake_entry(manifest: dict, entry: dict) -> bytes:
    """Regenerate one manifest entry from scratch."""
    return _entry_bytes(entry, manifest["params"])


def verify(dataset_dir) -> list:
    """Paths whose contents no longer match their checksum."""
    m = read_manifest(dataset_dir)
    bad = []
    for e in m["entries"]:
        buf = (Path(dataset_dir) / e["path"]).read_bytes()
        if hashlib.sha256(buf).hexdigest() != e["sha256"]:
            bad.append(e["path"])
    return bad


def load_examples(dataset_dir, resolution: int, spp_levels=None) -> list:
    """Pair each sparse entry at ``resolution`` with its ground truth."""
    m = read_manifest(dataset_dir)
    gts = {(e["template"], e["seed"], e["block"]): e for e in m["entries"]
           if e["kind"] == "gt" and e["resolution"] == resolution}
    out = []
    for e in m["entries"]:
        if e["kind"] != "sparse" or e["resolution"] != resolution:
            continue
        if spp_levels is not None and e["spp_level"] not in spp_levels:
            continue
        gt = gts[(e["template"], e["seed"], e["block"])]
        out.append(TrainingExample(fld.load(Path(dataset_dir) / e["path"]), fld.load(Path(dataset_dir) / gt["path"])))
    return out
