"""Small vectorized path tracer.

Geometry is spheres plus planar parallelograms/triangles, intersected with an
exhaustive loop over primitives (scenes here have a few dozen at most).
Everything works on batches of rays: ``origins`` and ``dirs`` are ``(N, 3)``.

Estimator layout for camera paths:

* first surface vertex: next-event estimation toward area lights and one
  direction sample (BRDF, or the guide mixture when a guide is given),
  combined with the balance heuristic;
* deeper vertices: the same light/BRDF combination, with BRDF sampling
  only (the guide is used once per path);
* Russian roulette once a path has scattered three times.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    FOUR_PI,
    InvalidArgument,
    Rng,
    cell_index,
    luminance,
    normalize,
    orthonormal_basis,
    square_to_dir,
)

log = logging.getLogger(__name__)

RAY_EPS = 1e-4
RR_DEPTH = 3
RR_MIN, RR_MAX = 0.05, 0.95
CHUNK = 1 << 15

LAMBERTIAN = 0
GLOSSY = 1
_KINDS = {"lambertian": LAMBERTIAN, "glossy": GLOSSY, "glossy-phong": GLOSSY, "phong": GLOSSY}


@dataclass
class Material:
    kind: str
    albedo: tuple
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidArgument(f"unknown material kind {self.kind!r}")
        a = np.asarray(self.albedo, dtype=np.float64)
        if a.shape != (3,) or np.any(a < 0) or np.any(a > 1):
            raise InvalidArgument(f"albedo must be 3 values in [0, 1], got {self.albedo}")
        if not np.isfinite(self.exponent) or self.exponent < 1:
            raise InvalidArgument("exponent must be finite and >= 1")


@dataclass
class Camera:
    position: tuple
    look_at: tuple
    up: tuple = (0.0, 1.0, 0.0)
    vfov: float = 40.0
    width: int = 32
    height: int = 32

    def rays(self, px, py):
        """Primary rays through continuous pixel coordinates (y grows downward)."""
        pos = np.asarray(self.position, dtype=np.float64)
        fwd = normalize(np.asarray(self.look_at, dtype=np.float64) - pos)
        right = normalize(np.cross(fwd, np.asarray(self.up, dtype=np.float64)))
        up = np.cross(right, fwd)
        th = np.tan(np.radians(self.vfov) * 0.5)
        aspect = self.width / self.height
        x = (2.0 * np.asarray(px) / self.width - 1.0) * aspect * th
        y = (1.0 - 2.0 * np.asarray(py) / self.height) * th
        d = fwd + x[..., None] * right + y[..., None] * up
        return np.broadcast_to(pos, d.shape).copy(), normalize(d)


@dataclass
class Sphere:
    center: tuple
    radius: float
    material: int


@dataclass
class Quad:
    corner: tuple
    edge1: tuple
    edge2: tuple
    material: int


@dataclass
class Triangle:
    v0: tuple
    v1: tuple
    v2: tuple
    material: int


@dataclass
class AreaLight:
    """One-sided emitting parallelogram; emits toward ``edge1 x edge2``."""

    corner: tuple
    edge1: tuple
    edge2: tuple
    radiance: tuple


@dataclass
class Scene:
    camera: Camera
    materials: list
    spheres: list = field(default_factory=list)
    quads: list = field(default_factory=list)
    triangles: list = field(default_factory=list)
    lights: list = field(default_factory=list)
    environment: tuple = (0.0, 0.0, 0.0)
    name: str = "scene"

    def __post_init__(self):
        nm = len(self.materials)
        for p in [*self.spheres, *self.quads, *self.triangles]:
            if not 0 <= p.material < nm:
                raise InvalidArgument(f"primitive references missing material {p.material}")
        self.environment = np.asarray(self.environment, dtype=np.float64)
        if not self.lights and not np.any(self.environment > 0):
            raise InvalidArgument("scene has no emitter")
        self._compile()

    def _compile(self):
        mats = self.materials
        self.mat_kind = np.array([_KINDS[m.kind] for m in mats], dtype=np.int64)
        self.mat_albedo = np.array([m.albedo for m in mats], dtype=np.float64).reshape(-1, 3)
        self.mat_exp = np.array([m.exponent for m in mats], dtype=np.float64)

        self.sph_c = np.array([s.center for s in self.spheres], dtype=np.float64).reshape(-1, 3)
        self.sph_r = np.array([s.radius for s in self.spheres], dtype=np.float64)
        self.sph_m = np.array([s.material for s in self.spheres], dtype=np.int64)

        p0, e1, e2, tri, mat, light = [], [], [], [], [], []
        for q in self.quads:
            p0.append(q.corner); e1.append(q.edge1); e2.append(q.edge2)
            tri.append(False); mat.append(q.material); light.append(-1)
        for t in self.triangles:
            a = np.asarray(t.v0, dtype=np.float64)
            p0.append(a); e1.append(np.asarray(t.v1) - a); e2.append(np.asarray(t.v2) - a)
            tri.append(True); mat.append(t.material); light.append(-1)
        for i, l in enumerate(self.lights):
            p0.append(l.corner); e1.append(l.edge1); e2.append(l.edge2)
            tri.append(False); mat.append(-1); light.append(i)
        self.pl_p0 = np.array(p0, dtype=np.float64).reshape(-1, 3)
        self.pl_e1 = np.array(e1, dtype=np.float64).reshape(-1, 3)
        self.pl_e2 = np.array(e2, dtype=np.float64).reshape(-1, 3)
        self.pl_tri = np.array(tri, dtype=bool)
        self.pl_m = np.array(mat, dtype=np.int64)
        self.pl_light = np.array(light, dtype=np.int64)
        cr = np.cross(self.pl_e1, self.pl_e2)
        self.pl_n = cr / np.maximum(np.linalg.norm(cr, axis=-1, keepdims=True), 1e-300)

        if self.lights:
            self.light_p0 = np.array([l.corner for l in self.lights], dtype=np.float64)
            self.light_e1 = np.array([l.edge1 for l in self.lights], dtype=np.float64)
            self.light_e2 = np.array([l.edge2 for l in self.lights], dtype=np.float64)
            self.light_L = np.array([l.radiance for l in self.lights], dtype=np.float64)
            c = np.cross(self.light_e1, self.light_e2)
            self.light_area = np.linalg.norm(c, axis=-1)
            self.light_n = c / self.light_area[:, None]
            power = self.light_area * np.maximum(luminance(self.light_L), 1e-12)
            self.light_psel = power / power.sum()
            self.light_cdf = np.cumsum(self.light_psel)
        else:
            self.light_area = np.zeros(0)

    @property
    def n_primitives(self):
        return len(self.sph_r) + len(self.pl_m)


@dataclass
class Hit:
    """Batched intersection record; ``prim == -1`` marks a miss."""

    t: np.ndarray
    prim: np.ndarray
    position: np.ndarray
    normal: np.ndarray  # faces the incoming ray
    material: np.ndarray  # -1 for emitters and misses
    light: np.ndarray  # emitter index or -1
    front: np.ndarray  # ray arrived on the emitting side (planar prims)

    @property
    def valid(self):
        return self.prim >= 0


def _intersect_chunk(scene: Scene, o, d, t_max=None):
    n = o.shape[0]
    best_t = np.full(n, np.inf) if t_max is None else np.asarray(t_max, dtype=np.float64).copy()
    best_p = np.full(n, -1, dtype=np.int64)
    ns = len(scene.sph_r)
    if ns:
        oc = o[:, None, :] - scene.sph_c[None]
        b = np.einsum("npk,nk->np", oc, d)
        c = np.einsum("npk,npk->np", oc, oc) - scene.sph_r[None] ** 2
        disc = b * b - c
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(disc)
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > RAY_EPS, t0, np.where(t1 > RAY_EPS, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(n), k]
        upd = tk < best_t
        best_t = np.where(upd, tk, best_t)
        best_p = np.where(upd, k, best_p)
    npl = len(scene.pl_m)
    if npl:
        e1, e2 = scene.pl_e1[None], scene.pl_e2[None]
        pvec = np.cross(d[:, None, :], e2)
        det = np.einsum("npk,npk->np", np.broadcast_to(e1, pvec.shape), pvec)
        good = np.abs(det) > 1e-14
        inv = np.where(good, 1.0 / np.where(good, det, 1.0), 0.0)
        tvec = o[:, None, :] - scene.pl_p0[None]
        u = np.einsum("npk,npk->np", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = np.einsum("nk,npk->np", d, qvec) * inv
        t = np.einsum("npk,npk->np", np.broadcast_to(e2, qvec.shape), qvec) * inv
        inside = np.where(scene.pl_tri[None], u + v <= 1.0, (u <= 1.0) & (v <= 1.0))
        ok = good & (u >= 0) & (v >= 0) & inside & (t > RAY_EPS)
        t = np.where(ok, t, np.inf)
        k = np.argmin(t, axis=1)
        tk = t[np.arange(n), k]
        upd = tk < best_t
        best_t = np.where(upd, tk, best_t)
        best_p = np.where(upd, ns + k, best_p)
    return best_t, best_p


def intersect_batch(scene: Scene, origins, dirs) -> Hit:
    """Nearest hits (``t > RAY_EPS``) for a batch of rays."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = o.shape[0]
    t = np.empty(n)
    prim = np.empty(n, dtype=np.int64)
    for s in range(0, n, CHUNK):
        t[s:s + CHUNK], prim[s:s + CHUNK] = _intersect_chunk(scene, o[s:s + CHUNK], d[s:s + CHUNK])
    return _make_hit(scene, o, d, t, prim)


def _make_hit(scene, o, d, t, prim):
    n = len(t)
    valid = prim >= 0
    pos = o + d * np.where(valid, t, 0.0)[:, None]
    normal = np.zeros((n, 3))
    material = np.full(n, -1, dtype=np.int64)
    light = np.full(n, -1, dtype=np.int64)
    front = np.zeros(n, dtype=bool)
    ns = len(scene.sph_r)
    sph = valid & (prim < ns)
    if np.any(sph):
        k = prim[sph]
        normal[sph] = (pos[sph] - scene.sph_c[k]) / scene.sph_r[k][:, None]
        material[sph] = scene.sph_m[k]
    pl = valid & (prim >= ns)
    if np.any(pl):
        k = prim[pl] - ns
        normal[pl] = scene.pl_n[k]
        material[pl] = scene.pl_m[k]
        light[pl] = scene.pl_light[k]
    cosv = np.einsum("nk,nk->n", normal, d)
    front = valid & (cosv < 0)
    normal = np.where((cosv > 0)[:, None], -normal, normal)
    return Hit(t=np.where(valid, t, np.inf), prim=prim, position=pos, normal=normal,
               material=material, light=light, front=front)


def intersect(scene: Scene, origin, direction):
    """Single-ray convenience wrapper; returns a dict-like :class:`Hit` row or None."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise InvalidArgument("ray direction must be unit length")
    h = intersect_batch(scene, np.asarray(origin, dtype=np.float64)[None], d[None])
    if h.prim[0] < 0:
        return None
    return Hit(t=h.t[0], prim=h.prim[0], position=h.position[0], normal=h.normal[0],
               material=h.material[0], light=h.light[0], front=h.front[0])


def occluded(scene: Scene, origins, targets):
    """True where the segment origin->target is blocked before the target."""
    o = np.asarray(origins, dtype=np.float64)
    delta = np.asarray(targets, dtype=np.float64) - o
    dist = np.linalg.norm(delta, axis=-1)
    d = delta / np.maximum(dist, 1e-300)[:, None]
    out = np.empty(len(o), dtype=bool)
    for s in range(0, len(o), CHUNK):
        tmax = dist[s:s + CHUNK] * (1.0 - 1e-6) - RAY_EPS
        t, _ = _intersect_chunk(scene, o[s:s + CHUNK], d[s:s + CHUNK], t_max=tmax)
        out[s:s + CHUNK] = t < tmax
    return out


# --------------------------------------------------------------------------- BRDFs


def _reflect(wo, n):
    return 2.0 * np.einsum("nk,nk->n", wo, n)[:, None] * n - wo


def eval_brdf_batch(scene: Scene, mat, wi, wo, n):
    """BRDF values ``(N, 3)`` and BRDF-sampling densities ``(N,)`` (per sr)."""
    mat = np.asarray(mat)
    kind = scene.mat_kind[mat]
    alb = scene.mat_albedo[mat]
    e = scene.mat_exp[mat]
    cos_i = np.einsum("nk,nk->n", wi, n)
    cos_o = np.einsum("nk,nk->n", wo, n)
    up = (cos_i > 0) & (cos_o > 0)
    lam = kind == LAMBERTIAN
    cos_a = np.maximum(np.einsum("nk,nk->n", _reflect(wo, n), wi), 0.0)
    lobe = cos_a ** e
    fval = np.where(lam, 1.0 / np.pi, (e + 2.0) / (2.0 * np.pi) * lobe)
    pdf = np.where(lam, np.maximum(cos_i, 0.0) / np.pi, (e + 1.0) / (2.0 * np.pi) * lobe)
    value = np.where(up[:, None], alb * fval[:, None], 0.0)
    pdf = np.where(up, pdf, 0.0)
    return value, pdf


def eval_brdf(m: Material, wi, wo, n):
    """Single-material BRDF evaluation: ``(value rgb, pdf)``."""
    if m.kind not in _KINDS:
        raise InvalidArgument(f"unknown material kind {m.kind!r}")
    tmp = _MaterialTable([m])
    wi, wo, n = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (wi, wo, n))
    value, pdf = eval_brdf_batch(tmp, np.zeros(len(wi), dtype=np.int64), wi, wo, n)
    if value.shape[0] == 1:
        return value[0], float(pdf[0])
    return value, pdf


class _MaterialTable:
    def __init__(self, materials):
        self.mat_kind = np.array([_KINDS[m.kind] for m in materials], dtype=np.int64)
        self.mat_albedo = np.array([m.albedo for m in materials], dtype=np.float64).reshape(-1, 3)
        self.mat_exp = np.array([m.exponent for m in materials], dtype=np.float64)


def sample_brdf_batch(scene: Scene, mat, wo, n, rng: Rng):
    """Sample directions from the BRDF lobe. Glossy samples that fall below
    the surface are returned with pdf 0 (the lobe loses that mass)."""
    m = len(mat)
    kind = scene.mat_kind[mat]
    e = scene.mat_exp[mat]
    xi = rng.random((m, 2))
    phi = 2.0 * np.pi * xi[:, 1]
    lam = kind == LAMBERTIAN
    cos_t = np.where(lam, np.sqrt(1.0 - xi[:, 0]), xi[:, 0] ** (1.0 / (e + 1.0)))
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    axis = np.where(lam[:, None], n, _reflect(wo, n))
    t, b = orthonormal_basis(axis)
    wi = (sin_t * np.cos(phi))[:, None] * t + (sin_t * np.sin(phi))[:, None] * b + cos_t[:, None] * axis
    wi = normalize(wi)
    _, pdf = eval_brdf_batch(scene, mat, wi, wo, n)
    return wi, pdf


# --------------------------------------------------------------------------- lights


def sample_lights(scene: Scene, p, rng: Rng):
    """Pick a light by power and a uniform point on it.

    Returns ``(dir, dist, radiance, pdf_solid_angle)``; pdf is 0 where the
    sampled point faces away from ``p``.
    """
    m = len(p)
    xi = rng.random((m, 3))
    li = np.minimum(np.searchsorted(scene.light_cdf, xi[:, 0] * scene.light_cdf[-1], side="right"),
                    len(scene.lights) - 1)
    y = scene.light_p0[li] + xi[:, 1:2] * scene.light_e1[li] + xi[:, 2:3] * scene.light_e2[li]
    delta = y - p
    dist = np.linalg.norm(delta, axis=-1)
    wl = delta / np.maximum(dist, 1e-300)[:, None]
    cos_l = -np.einsum("nk,nk->n", wl, scene.light_n[li])
    pdf = np.where(cos_l > 1e-9,
                   scene.light_psel[li] * dist ** 2 / (scene.light_area[li] * np.maximum(cos_l, 1e-9)),
                   0.0)
    return wl, dist, y, scene.light_L[li], pdf


def light_pdf_at(scene: Scene, hit: Hit, origins):
    """Solid-angle NEE density for rays that landed on an emitter's front."""
    out = np.zeros(len(hit.t))
    sel = hit.front & (hit.light >= 0)
    if np.any(sel):
        li = hit.light[sel]
        delta = hit.position[sel] - origins[sel]
        dist2 = np.einsum("nk,nk->n", delta, delta)
        wl = delta / np.sqrt(dist2)[:, None]
        cos_l = np.abs(np.einsum("nk,nk->n", wl, scene.light_n[li]))
        out[sel] = scene.light_psel[li] * dist2 / (scene.light_area[li] * np.maximum(cos_l, 1e-12))
    return out


# --------------------------------------------------------------------------- transport


@dataclass
class TraceStats:
    rejected: int = 0
    paths: int = 0


def _nee(scene: Scene, p, nrm, mat, wo, rng: Rng):
    """Light-sampled direct illumination at surface points, balance-heuristic
    weighted against BRDF sampling."""
    out = np.zeros((len(p), 3))
    wl, dist, y, le, lpdf = sample_lights(scene, p, rng)
    f, bpdf = eval_brdf_batch(scene, mat, wl, wo, nrm)
    cos_i = np.einsum("nk,nk->n", wl, nrm)
    ok = (lpdf > 0) & (cos_i > 0) & np.any(f > 0, axis=1)
    if np.any(ok):
        ok[ok] = ~occluded(scene, p[ok] + nrm[ok] * RAY_EPS, y[ok])
    if np.any(ok):
        w = lpdf[ok] / (lpdf[ok] + bpdf[ok])
        out[ok] = f[ok] * le[ok] * (cos_i[ok] * w / lpdf[ok])[:, None]
    return out


def radiance_along(scene: Scene, origins, dirs, rng: Rng, max_scatter: int, depth_offset: int = 0,
                   stats: TraceStats | None = None, nee: bool = True):
    """Radiance arriving at ``origins`` from ``dirs``.

    Returns ``(le_first, total, light_pdf_first)`` where ``le_first`` is the
    emission seen at the first hit (so callers can MIS-weight it) and
    ``total`` includes it unweighted. Later vertices combine light sampling
    and BRDF sampling with the balance heuristic. ``max_scatter`` bounds
    further scattering events.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = o.shape[0]
    total = np.zeros((n, 3))
    le_first = np.zeros((n, 3))
    lpdf_first = np.zeros(n)
    beta = np.ones((n, 3))
    idx = np.arange(n)
    env = scene.environment
    use_nee = nee and len(scene.lights) > 0
    prev_pdf = np.zeros(n)
    for depth in range(max_scatter + 1):
        if idx.size == 0:
            break
        hit = intersect_batch(scene, o, d)
        miss = ~hit.valid
        if np.any(miss) and np.any(env > 0):
            total[idx[miss]] += beta[miss] * env
            if depth == 0:
                le_first[idx[miss]] = env
        emit = hit.front & (hit.light >= 0)
        if np.any(emit):
            le = scene.light_L[hit.light[emit]]
            if depth == 0:
                total[idx[emit]] += beta[emit] * le
                le_first[idx[emit]] = le
                lpdf_first[idx] = light_pdf_at(scene, hit, o)
            elif use_nee:
                lp = light_pdf_at(scene, hit, o)[emit]
                bp = prev_pdf[emit]
                total[idx[emit]] += beta[emit] * le * (bp / (bp + lp))[:, None]
            else:
                total[idx[emit]] += beta[emit] * le
        surf = hit.valid & (hit.material >= 0)
        if depth == max_scatter or not np.any(surf):
            break
        wo = -d[surf]
        nrm = hit.normal[surf]
        mat = hit.material[surf]
        if use_nee:
            total[idx[surf]] += beta[surf] * _nee(scene, hit.position[surf], nrm, mat, wo, rng)
        wi, pdf = sample_brdf_batch(scene, mat, wo, nrm, rng)
        f, _ = eval_brdf_batch(scene, mat, wi, wo, nrm)
        cos_i = np.einsum("nk,nk->n", wi, nrm)
        ok = (pdf > 0) & (cos_i > 0)
        w = np.where(ok[:, None], f * (cos_i / np.where(ok, pdf, 1.0))[:, None], 0.0)
        b = beta[surf] * w
        keep = ok & np.any(b > 0, axis=1)
        if depth_offset + depth + 1 >= RR_DEPTH:
            q = np.clip(b.max(axis=1), RR_MIN, RR_MAX)
            keep &= rng.random(len(q)) < q
            b = b / q[:, None]
        finite = np.all(np.isfinite(b), axis=1)
        if stats is not None:
            stats.rejected += int(np.sum(keep & ~finite))
        keep &= finite
        idx = idx[surf][keep]
        beta = b[keep]
        prev_pdf = pdf[keep]
        o = hit.position[surf][keep] + nrm[keep] * RAY_EPS
        d = wi[keep]
    return le_first, total, lpdf_first


def incident_radiance_at(scene: Scene, points, normals, dirs, rng: Rng, max_depth: int = 5,
                         stats: TraceStats | None = None):
    """Incident radiance estimates at opaque surface points. Directions in the
    lower hemisphere see the inside of the surface and get zero."""
    dirs = np.asarray(dirs, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    out = np.zeros((len(dirs), 3))
    up = np.einsum("nk,nk->n", dirs, normals) > 0
    if np.any(up):
        o = np.asarray(points)[up] + normals[up] * RAY_EPS
        _, total, _ = radiance_along(scene, o, dirs[up], rng, max_depth - 1, depth_offset=1, stats=stats)
        out[up] = total
    return out


@dataclass
class PathRecords:
    """First-bounce incident radiance samples gathered while rendering."""

    block: np.ndarray
    direction: np.ndarray
    radiance: np.ndarray
    pdf: np.ndarray


def trace_radiance(scene: Scene, origins, dirs, rng: Rng, guide=None, block_ids=None, max_depth: int = 5,
                   nee: bool = True, stats: TraceStats | None = None):
    """Pixel radiance estimates for camera rays plus first-bounce records.

    ``guide`` is any object exposing ``sample_mixture_batch`` and
    ``pdf_mixture_batch`` (see :mod:`lfguide.guide`); ``block_ids`` selects the
    per-ray guiding distribution.
    """
    if max_depth < 1:
        raise InvalidArgument("max_depth must be >= 1")
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = o.shape[0]
    if block_ids is None:
        block_ids = np.zeros(n, dtype=np.int64)
    block_ids = np.asarray(block_ids, dtype=np.int64)
    if stats is not None:
        stats.paths += n
    result = np.zeros((n, 3))
    hit = intersect_batch(scene, o, d)
    miss = ~hit.valid
    result[miss] = scene.environment
    emit = hit.front & (hit.light >= 0)
    if np.any(emit):
        result[emit] = scene.light_L[hit.light[emit]]
    surf = np.flatnonzero(hit.valid & (hit.material >= 0))
    empty = PathRecords(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    if surf.size == 0:
        return result, empty
    p = hit.position[surf]
    nrm = hit.normal[surf]
    mat = hit.material[surf]
    wo = -d[surf]
    blk = block_ids[surf]
    use_nee = nee and len(scene.lights) > 0

    def dir_pdf(w, sel):
        if guide is None:
            return eval_brdf_batch(scene, mat[sel], w, wo[sel], nrm[sel])[1]
        return guide.pdf_mixture_batch(scene, mat[sel], nrm[sel], wo[sel], w, blk[sel])

    if use_nee:
        wl, dist, y, le, lpdf = sample_lights(scene, p, rng)
        f, _ = eval_brdf_batch(scene, mat, wl, wo, nrm)
        cos_i = np.einsum("nk,nk->n", wl, nrm)
        ok = (lpdf > 0) & (cos_i > 0) & np.any(f > 0, axis=1)
        if np.any(ok):
            vis = np.zeros(len(p), dtype=bool)
            vis[ok] = ~occluded(scene, p[ok] + nrm[ok] * RAY_EPS, y[ok])
            ok &= vis
        if np.any(ok):
            pd = dir_pdf(wl[ok], ok)
            wmis = lpdf[ok] / (lpdf[ok] + pd)
            contrib = f[ok] * le[ok] * (cos_i[ok] * wmis / lpdf[ok])[:, None]
            result[surf[ok]] += contrib

    if guide is None:
        wi, pdf = sample_brdf_batch(scene, mat, wo, nrm, rng)
    else:
        wi, pdf = guide.sample_mixture_batch(scene, mat, nrm, wo, blk, rng)
    f, _ = eval_brdf_batch(scene, mat, wi, wo, nrm)
    cos_i = np.einsum("nk,nk->n", wi, nrm)
    ok = (pdf > 0) & (cos_i > 0)
    le1 = np.zeros((len(p), 3))
    li = np.zeros((len(p), 3))
    if np.any(ok):
        le1[ok], li[ok], lpdf1 = radiance_along(scene, p[ok] + nrm[ok] * RAY_EPS, wi[ok], rng,
                                                max_depth - 1, depth_offset=1, stats=stats)
        wmis = np.ones(int(ok.sum()))
        if use_nee:
            has = lpdf1 > 0
            wmis[has] = pdf[ok][has] / (pdf[ok][has] + lpdf1[has])
        weight = f[ok] * (cos_i[ok] / pdf[ok])[:, None]
        contrib = weight * (li[ok] - le1[ok] + wmis[:, None] * le1[ok])
        result[surf[ok]] += contrib
    finite = np.all(np.isfinite(result), axis=1)
    if not np.all(finite):
        if stats is not None:
            stats.rejected += int(np.sum(~finite))
        log.warning("rejected %d non-finite path samples", int(np.sum(~finite)))
        result[~finite] = 0.0
    rec = PathRecords(block=blk[ok], direction=wi[ok], radiance=li[ok], pdf=pdf[ok])
    return result, rec


def render_pixels(scene: Scene, px, py, spp: int, rng: Rng, guide=None, block_ids=None,
                  max_depth: int = 5, nee: bool = True, stats: TraceStats | None = None):
    """Mean radiance and standard error for integer pixel coordinates.

    Pixels are processed in fixed groups, each with its own derived stream,
    so the result does not depend on how work is split.
    """
    px = np.asarray(px, dtype=np.int64).ravel()
    py = np.asarray(py, dtype=np.int64).ravel()
    npx = len(px)
    if block_ids is None:
        block_ids = np.zeros(npx, dtype=np.int64)
    block_ids = np.asarray(block_ids, dtype=np.int64).ravel()
    s1 = np.zeros((npx, 3))
    s2 = np.zeros((npx, 3))
    group = max(1, CHUNK * 4 // max(spp, 1))
    rays_per_pass = CHUNK * 4
    for g0 in range(0, npx, group):
        sl = slice(g0, min(npx, g0 + group))
        gpx, gpy, gblk = px[sl], py[sl], block_ids[sl]
        m = len(gpx)
        grng = rng.derive(g0)
        total = m * spp
        for s0 in range(0, total, rays_per_pass):
            k = np.arange(s0, min(total, s0 + rays_per_pass))
            which = k // spp
            jit = grng.random((len(k), 2))
            o, d = scene.camera.rays(gpx[which] + jit[:, 0], gpy[which] + jit[:, 1])
            est, _ = trace_radiance(scene, o, d, grng, guide=guide, block_ids=gblk[which],
                                    max_depth=max_depth, nee=nee, stats=stats)
            np.add.at(s1, g0 + which, est)
            np.add.at(s2, g0 + which, est * est)
    mean = s1 / spp
    var = np.maximum(s2 / spp - mean * mean, 0.0) * spp / max(spp - 1, 1)
    return mean, np.sqrt(var / spp)


def render(scene: Scene, spp: int, rng: Rng, guide=None, block_of_pixel=None, max_depth: int = 5,
           nee: bool = True, stats: TraceStats | None = None):
    """Full-frame render; returns ``(image (H, W, 3), stderr (H, W, 3))``."""
    w, h = scene.camera.width, scene.camera.height
    py, px = np.mgrid[0:h, 0:w]
    blk = None if block_of_pixel is None else np.asarray(block_of_pixel).ravel()
    mean, se = render_pixels(scene, px.ravel(), py.ravel(), spp, rng, guide=guide, block_ids=blk,
                             max_depth=max_depth, nee=nee, stats=stats)
    return mean.reshape(h, w, 3), se.reshape(h, w, 3)


# --------------------------------------------------------------------------- blocks and ground truth


@dataclass
class BlockPoints:
    """Surface points seen through a block's pixel centers."""

    position: np.ndarray
    normal: np.ndarray
    material: np.ndarray

    def __len__(self):
        return len(self.position)


def block_points(scene: Scene, x0: int, y0: int, size: int) -> BlockPoints:
    cam = scene.camera
    xs = np.arange(x0, min(x0 + size, cam.width))
    ys = np.arange(y0, min(y0 + size, cam.height))
    if xs.size == 0 or ys.size == 0:
        return BlockPoints(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64))
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    o, d = cam.rays(gx.ravel() + 0.5, gy.ravel() + 0.5)
    hit = intersect_batch(scene, o, d)
    ok = hit.valid & (hit.material >= 0)
    return BlockPoints(hit.position[ok], hit.normal[ok], hit.material[ok])


def sample_in_cells(iv, iu, res: int, rng: Rng):
    """Uniform directions (equal solid angle) inside the given grid cells."""
    xi = rng.random((len(iv), 2))
    s = np.stack([(iu + xi[:, 0]) / res, (iv + xi[:, 1]) / res], axis=-1)
    s = np.minimum(s, np.nextafter(1.0, 0.0))
    return square_to_dir(s)


def bake_ground_truth(scene: Scene, points: BlockPoints, resolution: int, spp_per_cell: int, rng: Rng,
                      block_id: int = 0, max_depth: int = 5):
    """Reference incident-radiance field of a block on a ``resolution^2`` grid.

    Each cell averages ``spp_per_cell`` estimates, each at a random
    representative point of the block with a direction uniform in the cell.
    """
    from .field import DenseField

    if spp_per_cell < 1:
        raise InvalidArgument("spp_per_cell must be >= 1")
    r = int(resolution)
    if r < 1 or r & (r - 1):
        raise InvalidArgument("resolution must be a power of two")
    if len(points) == 0:
        return DenseField.zeros(r, block_id=block_id, empty=True)
    cells = np.arange(r * r)
    iv = np.repeat(cells // r, spp_per_cell)
    iu = np.repeat(cells % r, spp_per_cell)
    dirs = sample_in_cells(iv, iu, r, rng)
    pick = rng.integers(0, len(points), size=len(iv))
    L = incident_radiance_at(scene, points.position[pick], points.normal[pick], dirs, rng, max_depth)
    L = L.reshape(r, r, spp_per_cell, 3)
    mean = L.mean(axis=2)
    var = L.var(axis=2, ddof=1) if spp_per_cell > 1 else np.zeros_like(mean)
    return DenseField(values=mean, counts=np.full((r, r), float(spp_per_cell)), variance=var,
                      block_id=block_id)


def cell_of_dirs(dirs, res):
    from .core import dir_to_square

    return cell_index(dir_to_square(dirs), res)


def cell_solid_angle(res: int) -> float:
    return FOUR_PI / (res * res)
