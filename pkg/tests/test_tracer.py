import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from lfguide import scenes
from lfguide.core import FOUR_PI, InvalidArgument, Rng, dir_to_square, normalize, square_to_dir
from lfguide.tracer import (BlockPoints, Camera, Material, Scene, Sphere, bake_ground_truth,
                            block_points, eval_brdf, eval_brdf_batch, intersect, intersect_batch,
                            render_pixels, sample_brdf_batch, trace_radiance)

Z = np.array([0.0, 0.0, 1.0])


def _empty_env(L=1.0):
    cam = Camera((0, 0, -5), (0, 0, 0), width=4, height=4)
    return Scene(camera=cam, materials=[Material("lambertian", (0.5,) * 3)], environment=(L, L, L))


# --------------------------------------------------------------------------- geometry


def test_intersect_examples():
    sc = Scene(camera=Camera((0, 0, 0), (0, 0, 1)), materials=[Material("lambertian", (0.5,) * 3)],
               spheres=[Sphere((0, 0, 5), 1.0, 0)], environment=(1, 1, 1))
    h = intersect(sc, (0, 0, 0), (0, 0, 1))
    assert h.t == pytest.approx(4.0, abs=1e-12)
    assert np.allclose(h.normal, [0, 0, -1])
    assert intersect(sc, (0, 0, 0), (0, 0, -1)) is None
    with pytest.raises(InvalidArgument):
        intersect(sc, (0, 0, 0), (0, 0, 2))


def _oracle_hit(scene, o, d):
    """Scalar loop over primitives: nearest t > 1e-4 and its primitive id."""
    best, bp = np.inf, -1
    k = 0
    for s in scene.spheres:
        oc = o - np.array(s.center)
        b = oc @ d
        c = oc @ oc - s.radius ** 2
        disc = b * b - c
        if disc >= 0:
            for t in (-b - np.sqrt(disc), -b + np.sqrt(disc)):
                if t > 1e-4:
                    if t < best:
                        best, bp = t, k
                    break
        k += 1
    planars = ([(q.corner, q.edge1, q.edge2, False) for q in scene.quads]
               + [(t.v0, np.subtract(t.v1, t.v0), np.subtract(t.v2, t.v0), True) for t in scene.triangles]
               + [(l.corner, l.edge1, l.edge2, False) for l in scene.lights])
    for p0, e1, e2, tri in planars:
        m = np.column_stack([e1, e2, -d])
        if abs(np.linalg.det(m)) > 1e-12:
            u, v, t = np.linalg.solve(m, o - np.asarray(p0, float))
            inside = u >= 0 and v >= 0 and ((u + v <= 1) if tri else (u <= 1 and v <= 1))
            if inside and 1e-4 < t < best:
                best, bp = t, k
        k += 1
    return best, bp


@pytest.mark.parametrize("name", ["cornell", "prism", "env_spheres"])
def test_intersect_vs_loop_oracle(name):
    sc = scenes.make_template(name, seed=4)
    rng = Rng(2)
    o = rng.random((1000, 3)) * 1.6 - 0.8 + np.array([0.0, 1.0, 0.0])
    d = normalize(rng.normal(size=(1000, 3)))
    h = intersect_batch(sc, o, d)
    for i in range(1000):
        t, p = _oracle_hit(sc, o[i], d[i])
        assert h.prim[i] == p
        if p >= 0:
            assert h.t[i] == pytest.approx(t, rel=1e-9, abs=1e-9)


def test_scene_validation():
    cam = Camera((0, 0, -5), (0, 0, 0))
    with pytest.raises(InvalidArgument):
        Scene(camera=cam, materials=[], spheres=[Sphere((0, 0, 0), 1, 0)], environment=(1, 1, 1))
    with pytest.raises(InvalidArgument):
        Scene(camera=cam, materials=[Material("lambertian", (0.5,) * 3)])
    with pytest.raises(InvalidArgument):
        Material("velvet", (0.5,) * 3)
    with pytest.raises(InvalidArgument):
        Material("lambertian", (1.2, 0.5, 0.5))


# --------------------------------------------------------------------------- BRDFs


def test_lambertian_examples():
    m = Material("lambertian", (0.5, 0.5, 0.5))
    val, pdf = eval_brdf(m, Z, Z, Z)
    assert np.allclose(val, 0.5 / np.pi)
    assert pdf == pytest.approx(1 / np.pi)
    val, pdf = eval_brdf(m, -Z, Z, Z)
    assert np.all(val == 0) and pdf == 0


def _hemisphere_quadrature(n=64):
    """Gauss-Legendre nodes in cos(theta) and uniform nodes in phi over the
    upper hemisphere; returns directions and weights (sum = 2 pi)."""
    x, w = np.polynomial.legendre.leggauss(n)
    c = 0.5 * (x + 1.0)
    wc = 0.5 * w
    phi = (np.arange(n) + 0.5) * 2 * np.pi / n
    cc, pp = np.meshgrid(c, phi, indexing="ij")
    s = np.sqrt(1 - cc ** 2)
    dirs = np.stack([s * np.cos(pp), s * np.sin(pp), cc], axis=-1).reshape(-1, 3)
    weights = (wc[:, None] * np.full(n, 2 * np.pi / n)[None]).reshape(-1)
    return dirs, weights


@pytest.mark.parametrize("exponent", [1.0, 5.0, 20.0])
def test_glossy_pdf_integrates_to_one(exponent):
    m = Material("glossy", (0.8, 0.8, 0.8), exponent)
    dirs, w = _hemisphere_quadrature(64)
    n = np.broadcast_to(Z, dirs.shape)
    _, pdf = eval_brdf(m, dirs, n, n)
    assert np.sum(pdf * w) == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("mat", [Material("lambertian", (1, 1, 1)), Material("glossy", (1, 1, 1), 1.0),
                                 Material("glossy", (1, 1, 1), 30.0)])
@pytest.mark.parametrize("theta", [0.0, 0.7, 1.4])
def test_energy_conservation(mat, theta):
    dirs, w = _hemisphere_quadrature(96)
    wo = np.array([np.sin(theta), 0.0, np.cos(theta)])
    n = np.broadcast_to(Z, dirs.shape)
    val, pdf = eval_brdf(mat, dirs, np.broadcast_to(wo, dirs.shape), n)
    albedo = np.sum(val[:, 0] * dirs[:, 2] * w)
    assert albedo <= 1.0 + 1e-3
    assert np.sum(pdf * w) <= 1.0 + 1e-3


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.floats(1.0, 50.0))
def test_brdf_reciprocity(v, e):
    a, b = np.array(v[:3]), np.array(v[3:])
    if np.linalg.norm(a) < 1e-2 or np.linalg.norm(b) < 1e-2:
        return
    a, b = normalize(a), normalize(b)
    for m in (Material("lambertian", (0.3, 0.5, 0.7)), Material("glossy", (0.3, 0.5, 0.7), e)):
        f1, _ = eval_brdf(m, a, b, Z)
        f2, _ = eval_brdf(m, b, a, Z)
        assert np.allclose(f1, f2, rtol=1e-9, atol=1e-12)


def _cell_probs(pdf_fn, res, sub=24):
    """Probability of each square-map cell by midpoint quadrature (4 pi area factor)."""
    g = (np.arange(res * sub) + 0.5) / (res * sub)
    uu, vv = np.meshgrid(g, g, indexing="xy")
    d = square_to_dir(np.stack([uu, vv], axis=-1).reshape(-1, 2))
    p = pdf_fn(d).reshape(res * sub, res * sub) * FOUR_PI / (res * sub) ** 2
    return p.reshape(res, sub, res, sub).sum(axis=(1, 3))


@pytest.mark.parametrize("mat,wo", [(Material("lambertian", (0.7,) * 3), Z),
                                    (Material("glossy", (0.7,) * 3, 8.0), normalize([0.3, 0.1, 1.0]))])
def test_brdf_sampler_chi_square(mat, wo):
    sc = Scene(camera=Camera((0, 0, -5), (0, 0, 0)), materials=[mat], environment=(1, 1, 1))
    n_s = 100_000
    mats = np.zeros(n_s, dtype=np.int64)
    wos = np.broadcast_to(wo, (n_s, 3)).copy()
    ns = np.broadcast_to(Z, (n_s, 3)).copy()
    wi, pdf = sample_brdf_batch(sc, mats, wos, ns, Rng(7))
    keep = pdf > 0
    res = 8
    s = dir_to_square(wi[keep])
    iv = np.minimum((s[:, 1] * res).astype(int), res - 1)
    iu = np.minimum((s[:, 0] * res).astype(int), res - 1)
    obs = np.bincount(iv * res + iu, minlength=res * res).astype(float)

    def pdf_fn(d):
        m = len(d)
        return eval_brdf_batch(sc, np.zeros(m, dtype=np.int64), d, np.broadcast_to(wo, (m, 3)),
                               np.broadcast_to(Z, (m, 3)))[1]

    exp = _cell_probs(pdf_fn, res).ravel() * n_s
    big = exp > 20
    # pool small cells and the lost below-horizon mass into one bin
    o, e = obs[big], exp[big]
    if n_s - e.sum() > 5:
        o, e = np.append(o, n_s - o.sum()), np.append(e, n_s - e.sum())
    else:
        e = e * o.sum() / e.sum()
    assert stats.chisquare(o, e).pvalue > 0.01
    _, pdf_check = eval_brdf(mat, wi[:100], wos[:100], ns[:100])
    assert np.allclose(pdf_check, pdf[:100])


# --------------------------------------------------------------------------- transport


def test_miss_returns_environment_exactly():
    sc = _empty_env(1.7)
    est, rec = trace_radiance(sc, np.zeros((5, 3)), normalize(Rng(0).normal(size=(5, 3))), Rng(1))
    assert np.array_equal(est, np.full((5, 3), 1.7))
    assert len(rec.pdf) == 0
    with pytest.raises(InvalidArgument):
        trace_radiance(sc, np.zeros((1, 3)), [[0, 0, 1.0]], Rng(0), max_depth=0)


def furnace_scene(albedo, env=1.0, res=8):
    sc = scenes.furnace(albedo=albedo, env=env, res=res)
    sc.camera = dataclasses.replace(sc.camera, vfov=25.0)  # whole frame sees the sphere
    return sc


@pytest.mark.parametrize("albedo,env", [(0.3, 1.0), (0.6, 1.0), (0.9, 2.0)])
def test_furnace_unguided(albedo, env):
    sc = furnace_scene(albedo, env)
    px, py = np.meshgrid(np.arange(8), np.arange(8))
    mean, se = render_pixels(sc, px.ravel(), py.ravel(), 256, Rng(3), max_depth=64)
    # pixels are independent; pool them into one estimate of rho * L
    m = mean[:, 0].mean()
    s = np.sqrt(np.sum(se[:, 0] ** 2)) / len(se)
    # a convex body sends every bounce back to the environment, so the
    # estimator can be exact; allow rounding on top of 3 standard errors
    assert abs(m - albedo * env) <= 3 * s + 1e-12


def test_guided_with_positive_guide_is_unbiased():
    from lfguide.field import DenseField
    from lfguide.guide import build_guides

    sc = scenes.make_template("cornell", res=16)
    rng = Rng(4)
    fld = DenseField(values=rng.random((8, 8, 3)) ** 4 * 10, counts=np.ones((8, 8)))
    guide = build_guides([fld], alpha=0.3, eps_floor=0.1)
    px = np.array([3, 8, 12, 5])
    py = np.array([12, 8, 4, 14])
    a, sa = render_pixels(sc, px, py, 4000, Rng(5))
    b, sb = render_pixels(sc, px, py, 4000, Rng(6), guide=guide, block_ids=np.zeros(4, dtype=np.int64))
    z = np.abs(a - b) / np.sqrt(sa ** 2 + sb ** 2 + 1e-30)
    assert np.all(z < 3.5)


# --------------------------------------------------------------------------- ground truth


def test_bake_constant_environment():
    sc = _empty_env(2.0)
    pts = BlockPoints(np.zeros((3, 3)), np.tile(Z, (3, 1)), np.zeros(3, dtype=np.int64))
    gt = bake_ground_truth(sc, pts, 8, 4, Rng(0))
    # upper hemisphere (v >= 0.5) sees the environment; the lower half is inside the surface
    assert np.all(gt.values[4:] == 2.0)
    assert np.all(gt.values[:4] == 0.0)
    assert np.all(gt.counts == 4)


def test_bake_empty_block_flagged():
    sc = _empty_env(1.0)
    pts = BlockPoints(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    gt = bake_ground_truth(sc, pts, 4, 2, Rng(0))
    assert gt.empty and np.all(gt.values == 0)
    with pytest.raises(InvalidArgument):
        bake_ground_truth(sc, pts, 4, 0, Rng(0))


def _block(scene):
    return block_points(scene, 0, 0, scene.camera.width)


def test_bake_variance_halves_with_double_spp():
    sc = scenes.make_template("env_spheres", seed=1, res=8)
    pts = _block(sc)
    reps = 40

    def var_at(spc):
        vals = np.stack([bake_ground_truth(sc, pts, 4, spc, Rng(10, spc, r)).values for r in range(reps)])
        v = vals.var(axis=0, ddof=1)
        return v[v > 0].mean()

    ratio = var_at(16) / var_at(8)
    assert 0.4 <= ratio <= 0.6


def test_bake_downsample_consistency():
    sc = scenes.make_template("window", seed=2, res=8)
    pts = _block(sc)
    fine = bake_ground_truth(sc, pts, 16, 16, Rng(1))
    coarse = bake_ground_truth(sc, pts, 4, 256, Rng(2))
    down = fine.values.reshape(4, 4, 4, 4, 3).mean(axis=(1, 3))
    var_down = fine.variance.reshape(4, 4, 4, 4, 3).sum(axis=(1, 3)) / 16 ** 2 / 16
    se = np.sqrt(var_down + coarse.variance / 256)
    z = np.abs(down - coarse.values) / np.maximum(se, 1e-12)
    assert np.all(z[se > 0] < 3.5)
    assert np.all(down[se == 0] == coarse.values[se == 0])
