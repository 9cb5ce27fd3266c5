"""Scene description files and procedural scene templates.

Scene files are TOML with ``format = 1``::

    format = 1
    name = "box"
    environment = [0.0, 0.0, 0.0]

    [camera]
    position = [0, 1, 3.4]
    look_at = [0, 1, 0]
    vfov = 40
    width = 32
    height = 32

    [materials.white]
    kind = "lambertian"        # or "glossy"
    albedo = [0.7, 0.7, 0.7]
    # exponent = 20            # glossy only

    [[spheres]]
    center = [0, 0.4, 0]
    radius = 0.4
    material = "white"

    [[quads]]                  # parallelogram corner + two edges
    corner = [-1, 0, -1]
    edge1 = [0, 0, 2]
    edge2 = [2, 0, 0]
    material = "white"

    [[triangles]]
    v0 = [...]
    v1 = [...]
    v2 = [...]
    material = "white"

    [[area_lights]]            # emits toward edge1 x edge2
    corner = [...]
    edge1 = [...]
    edge2 = [...]
    radiance = [10, 10, 10]
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .core import InvalidArgument, Rng
from .tracer import AreaLight, Camera, Material, Quad, Scene, Sphere, Triangle

SCENE_FORMAT = 1


def scene_from_dict(doc: dict) -> Scene:
    if doc.get("format") != SCENE_FORMAT:
        raise InvalidArgument(f"unsupported scene format {doc.get('format')!r}, expected {SCENE_FORMAT}")
    names = list(doc.get("materials", {}))
    mats = []
    for nm in names:
        m = doc["materials"][nm]
        mats.append(Material(kind=m["kind"], albedo=tuple(m["albedo"]), exponent=float(m.get("exponent", 1.0))))

    def mid(name):
        if name not in names:
            raise InvalidArgument(f"unknown material {name!r}")
        return names.index(name)

    cam = Camera(**doc["camera"])
    return Scene(
        camera=cam,
        materials=mats,
        spheres=[Sphere(tuple(s["center"]), float(s["radius"]), mid(s["material"])) for s in doc.get("spheres", [])],
        quads=[Quad(tuple(q["corner"]), tuple(q["edge1"]), tuple(q["edge2"]), mid(q["material"]))
               for q in doc.get("quads", [])],
        triangles=[Triangle(tuple(t["v0"]), tuple(t["v1"]), tuple(t["v2"]), mid(t["material"]))
                   for t in doc.get("triangles", [])],
        lights=[AreaLight(tuple(l["corner"]), tuple(l["edge1"]), tuple(l["edge2"]), tuple(l["radiance"]))
                for l in doc.get("area_lights", [])],
        environment=tuple(doc.get("environment", (0.0, 0.0, 0.0))),
        name=doc.get("name", "scene"),
    )


def scene_to_dict(scene: Scene) -> dict:
    names = [f"m{i}" for i in range(len(scene.materials))]

    def fl(x):
        return [float(v) for v in np.asarray(x).ravel()]

    mats = {}
    for nm, m in zip(names, scene.materials):
        mats[nm] = {"kind": m.kind, "albedo": fl(m.albedo)}
        if m.kind != "lambertian":
            mats[nm]["exponent"] = float(m.exponent)
    c = scene.camera
    doc = {
        "format": SCENE_FORMAT,
        "name": scene.name,
        "environment": fl(scene.environment),
        "camera": {"position": fl(c.position), "look_at": fl(c.look_at), "up": fl(c.up),
                   "vfov": float(c.vfov), "width": int(c.width), "height": int(c.height)},
        "materials": mats,
    }
    if scene.spheres:
        doc["spheres"] = [{"center": fl(s.center), "radius": float(s.radius), "material": names[s.material]}
                          for s in scene.spheres]
    if scene.quads:
        doc["quads"] = [{"corner": fl(q.corner), "edge1": fl(q.edge1), "edge2": fl(q.edge2),
                         "material": names[q.material]} for q in scene.quads]
    if scene.triangles:
        doc["triangles"] = [{"v0": fl(t.v0), "v1": fl(t.v1), "v2": fl(t.v2), "material": names[t.material]}
                            for t in scene.triangles]
    if scene.lights:
        doc["area_lights"] = [{"corner": fl(l.corner), "edge1": fl(l.edge1), "edge2": fl(l.edge2),
                               "radiance": fl(l.radiance)} for l in scene.lights]
    return doc


def load_scene(path) -> Scene:
    """Load a scene file, or a built-in template given as ``template:<name>[:seed]``."""
    s = str(path)
    if s.startswith("template:"):
        parts = s.split(":")
        seed = int(parts[2]) if len(parts) > 2 else None
        return make_template(parts[1], seed=seed)
    with open(path, "rb") as f:
        return scene_from_dict(tomli.load(f))


def save_scene(scene: Scene, path):
    Path(path).write_bytes(tomli_w.dumps(scene_to_dict(scene)).encode())


# --------------------------------------------------------------------------- templates


def _box(mats, size=1.0, red=None, green=None, white=0, open_front=True):
    """Quads of a Cornell-style box spanning [-s, s] x [0, 2s] x [-s, s]."""
    s = size
    q = [
        Quad((-s, 0, -s), (0, 0, 2 * s), (2 * s, 0, 0), white),  # floor, normal +y
        Quad((-s, 2 * s, -s), (2 * s, 0, 0), (0, 0, 2 * s), white),  # ceiling
        Quad((-s, 0, -s), (2 * s, 0, 0), (0, 2 * s, 0), white),  # back
        Quad((-s, 0, -s), (0, 2 * s, 0), (0, 0, 2 * s), white if red is None else red),  # left
        Quad((s, 0, -s), (0, 0, 2 * s), (0, 2 * s, 0), white if green is None else green),  # right
    ]
    return q


def _jitter(rng, scale, n=3):
    return rng.normal(0.0, scale, n) if rng is not None else np.zeros(n)


def _cam(res, pos, look, vfov=40.0):
    return Camera(position=tuple(float(x) for x in pos), look_at=tuple(float(x) for x in look),
                  vfov=vfov, width=res, height=res)


def furnace(albedo=0.6, env=1.0, res=16, rng=None):
    """Convex lambertian sphere in a constant environment."""
    mats = [Material("lambertian", (albedo,) * 3)]
    pos = np.array([0.0, 0.0, 3.0]) + _jitter(rng, 0.2)
    return Scene(camera=_cam(res, pos, (0, 0, 0), 30.0), materials=mats,
                 spheres=[Sphere((0.0, 0.0, 0.0), 1.0, 0)], environment=(env,) * 3, name="furnace")


def cornell(res=32, rng=None, glossy=False):
    a = 0.7 if rng is None else float(rng.uniform(0.5, 0.8))
    mats = [Material("lambertian", (a, a, a)), Material("lambertian", (0.65, 0.1, 0.1)),
            Material("lambertian", (0.1, 0.6, 0.15)),
            Material("glossy", (0.8, 0.8, 0.8), 30.0) if glossy else Material("lambertian", (0.6, 0.6, 0.3))]
    lp = np.array([-0.25, 1.999, -0.25]) + np.append(_jitter(rng, 0.15, 1), [0, 0]) * [1, 0, 0]
    power = 12.0 if rng is None else float(rng.uniform(8, 16))
    lights = [AreaLight(tuple(lp), (0.5, 0, 0), (0, 0, 0.5), (power,) * 3)]
    sp = [Sphere((-0.4, 0.35, -0.3), 0.35, 3), Sphere((0.45, 0.3, 0.3), 0.3, 0)]
    pos = np.array([0.0, 1.0, 3.4]) + _jitter(rng, 0.1)
    return Scene(camera=_cam(res, pos, (0, 1, 0)), materials=mats, quads=_box(mats, red=1, green=2),
                 spheres=sp, lights=lights, name="cornell_glossy" if glossy else "cornell")


def small_light(res=32, rng=None):
    """Box lit by a small, bright ceiling emitter."""
    mats = [Material("lambertian", (0.7, 0.7, 0.7)), Material("lambertian", (0.65, 0.1, 0.1)),
            Material("lambertian", (0.1, 0.6, 0.15))]
    off = _jitter(rng, 0.2, 2)
    lp = (-0.15 + off[0], 1.999, -0.15 + off[1])
    lights = [AreaLight(lp, (0.3, 0, 0), (0, 0, 0.3), (40.0, 40.0, 40.0))]
    sp = [Sphere((0.0, 0.4, -0.2), 0.4, 0)]
    pos = np.array([0.0, 1.0, 3.4]) + _jitter(rng, 0.1)
    return Scene(camera=_cam(res, pos, (0, 1, 0)), materials=mats, quads=_box(mats, red=1, green=2),
                 spheres=sp, lights=lights, name="small_light")


def spotlit(res=32, rng=None):
    """Small bright emitter facing the ceiling behind a blocker: everything the
    camera sees is lit indirectly through one bright ceiling patch."""
    mats = [Material("lambertian", (0.75, 0.75, 0.75)), Material("lambertian", (0.6, 0.15, 0.1))]
    off = _jitter(rng, 0.1, 2)
    y = 1.2
    lights = [AreaLight((-0.2 + off[0], y, -0.7 + off[1]), (0, 0, 0.4), (0.4, 0, 0), (100.0, 100.0, 100.0))]
    # blocker below the emitter so the floor never sees it directly
    quads = _box(mats, red=1) + [Quad((-0.35 + off[0], y - 0.02, -0.85 + off[1]), (0.7, 0, 0), (0, 0, 0.7), 0)]
    pos = np.array([0.0, 1.0, 3.4]) + _jitter(rng, 0.1)
    return Scene(camera=_cam(res, pos, (0, 0.9, 0)), materials=mats, quads=quads,
                 spheres=[Sphere((0.45, 0.3, 0.2), 0.3, 0)], lights=lights, name="spotlit")


def env_spheres(res=32, rng=None):
    """Glossy and diffuse spheres on a ground plane under a sky."""
    mats = [Material("lambertian", (0.6, 0.6, 0.6)), Material("glossy", (0.9, 0.8, 0.6), 40.0),
            Material("lambertian", (0.2, 0.4, 0.7))]
    sky = 1.0 if rng is None else float(rng.uniform(0.6, 1.4))
    quads = [Quad((-4, 0, -4), (0, 0, 8), (8, 0, 0), 0)]
    sp = [Sphere((-0.6, 0.5, 0.0), 0.5, 1), Sphere((0.6, 0.4, 0.2), 0.4, 2)]
    pos = np.array([0.0, 1.2, 3.5]) + _jitter(rng, 0.15)
    return Scene(camera=_cam(res, pos, (0, 0.4, 0)), materials=mats, quads=quads, spheres=sp,
                 environment=(sky, sky, sky * 1.1), name="env_spheres")


def window(res=32, rng=None):
    """Room lit only through an opening in the ceiling by a bright sky."""
    mats = [Material("lambertian", (0.7, 0.7, 0.7)), Material("lambertian", (0.5, 0.5, 0.2))]
    hx = 0.25 if rng is None else float(rng.uniform(0.15, 0.35))
    quads = [
        Quad((-1, 0, -1), (0, 0, 2), (2, 0, 0), 0),
        Quad((-1, 0, -1), (2, 0, 0), (0, 2, 0), 0),
        Quad((-1, 0, -1), (0, 2, 0), (0, 0, 2), 1),
        Quad((1, 0, -1), (0, 0, 2), (0, 2, 0), 0),
        # ceiling with a square hole around the origin, four strips
        Quad((-1, 2, -1), (2, 0, 0), (0, 0, 1 - hx), 0),
        Quad((-1, 2, hx), (2, 0, 0), (0, 0, 1 - hx), 0),
        Quad((-1, 2, -hx), (1 - hx, 0, 0), (0, 0, 2 * hx), 0),
        Quad((hx, 2, -hx), (1 - hx, 0, 0), (0, 0, 2 * hx), 0),
    ]
    pos = np.array([0.0, 1.0, 3.4]) + _jitter(rng, 0.1)
    return Scene(camera=_cam(res, pos, (0, 1, 0)), materials=mats, quads=quads,
                 spheres=[Sphere((0.3, 0.35, 0.0), 0.35, 0)], environment=(3.0, 3.0, 3.0), name="window")


def prism(res=32, rng=None):
    """Triangle geometry in a lit box."""
    mats = [Material("lambertian", (0.7, 0.7, 0.7)), Material("lambertian", (0.2, 0.3, 0.7)),
            Material("glossy", (0.7, 0.7, 0.7), 15.0)]
    h = 0.8 if rng is None else float(rng.uniform(0.6, 1.0))
    a, b, c = (-0.5, 0, -0.3), (0.3, 0, -0.5), (0.0, 0, 0.3)
    apex = (0.0, h, -0.15)
    tris = [Triangle(a, b, apex, 2), Triangle(b, c, apex, 1), Triangle(c, a, apex, 1)]
    lights = [AreaLight((-0.2, 1.999, -0.2), (0.4, 0, 0), (0, 0, 0.4), (15.0, 15.0, 15.0))]
    pos = np.array([0.0, 1.0, 3.4]) + _jitter(rng, 0.1)
    return Scene(camera=_cam(res, pos, (0, 0.8, 0)), materials=mats, quads=_box(mats), triangles=tris,
                 lights=lights, name="prism")


def two_lights(res=32, rng=None):
    mats = [Material("lambertian", (0.7, 0.7, 0.7)), Material("glossy", (0.8, 0.8, 0.8), 60.0)]
    warm = 20.0 if rng is None else float(rng.uniform(10, 30))
    lights = [AreaLight((-0.9, 1.999, -0.3), (0.3, 0, 0), (0, 0, 0.3), (warm, warm * 0.6, warm * 0.3)),
              AreaLight((0.6, 1.999, 0.2), (0.2, 0, 0), (0, 0, 0.2), (5.0, 8.0, 25.0))]
    pos = np.array([0.0, 1.0, 3.4]) + _jitter(rng, 0.1)
    return Scene(camera=_cam(res, pos, (0, 1, 0)), materials=mats, quads=_box(mats),
                 spheres=[Sphere((0.0, 0.45, -0.1), 0.45, 1)], lights=lights, name="two_lights")


TEMPLATES = {
    "furnace": furnace,
    "cornell": cornell,
    "cornell_glossy": lambda res=32, rng=None: cornell(res=res, rng=rng, glossy=True),
    "small_light": small_light,
    "spotlit": spotlit,
    "env_spheres": env_spheres,
    "window": window,
    "prism": prism,
    "two_lights": two_lights,
}

# scene families used for dataset generation (the furnace is a test fixture)
DATASET_TEMPLATES = ["cornell", "cornell_glossy", "small_light", "spotlit", "env_spheres", "window", "prism",
                     "two_lights"]


def make_template(name: str, seed: int | None = None, res: int = 32) -> Scene:
    """Instantiate a template; ``seed`` randomizes viewpoint, lighting and materials."""
    if name not in TEMPLATES:
        raise InvalidArgument(f"unknown scene template {name!r}; choose from {sorted(TEMPLATES)}")
    rng = None if seed is None else Rng(seed, 7).gen
    scene = TEMPLATES[name](res=res, rng=rng)
    return scene
