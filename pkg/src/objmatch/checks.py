"""Self-verification suites: projection and occlusion oracles, loss identities, finite differences.

Used by the ``selftest`` subcommand and by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from objmatch.descriptor import DescriptorNet, DescriptorNetConfig
from objmatch.geometry import compose_extrinsic, project_vertex, projection_matrix
from objmatch.loss import LossConfig, loss_and_gradients, match_loss, non_match_loss, total_loss
from objmatch.rng import seeded_rng
from objmatch.types import CameraIntrinsics, DomainTag, MatchSet, ObjectInstance, RgbdImage, RigidPose, TriMesh


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def projection_oracle(n: int = 1000, seed: int = 0) -> tuple[float, int]:
    """Max pixel disagreement between the matrix path and scalar pinhole arithmetic.

    Returns ``(max_error_px, in_bounds_count)``; only in-bounds projections count.
    """
    rng = seeded_rng(seed)
    worst, count = 0.0, 0
    for _ in range(n):
        width, height = int(rng.integers(16, 1281)), int(rng.integers(16, 961))
        cam = CameraIntrinsics(float(rng.uniform(0.5, 2.0) * width), float(rng.uniform(0.5, 2.0) * width),
                               float(rng.uniform(0.3, 0.7) * width), float(rng.uniform(0.3, 0.7) * height),
                               width, height)
        pose = RigidPose(random_rotation(rng), rng.uniform(-0.2, 0.2, 3) + np.array([0.0, 0.0, rng.uniform(0.5, 3.0)]))
        vertex = rng.uniform(-0.1, 0.1, 3)
        P = projection_matrix(cam, compose_extrinsic(pose))
        (u, v), depth, inside = project_vertex(P, pose, vertex, cam)
        r, t = pose.rotation, pose.translation
        x = r[0][0] * vertex[0] + r[0][1] * vertex[1] + r[0][2] * vertex[2] + t[0]
        y = r[1][0] * vertex[0] + r[1][1] * vertex[1] + r[1][2] * vertex[2] + t[1]
        z = r[2][0] * vertex[0] + r[2][1] * vertex[1] + r[2][2] * vertex[2] + t[2]
        if not inside:
            continue
        count += 1
        su, sv = cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy
        worst = max(worst, abs(su - u), abs(sv - v), abs(depth - z))
    return worst, count


# -- two-plane occlusion scenes ---------------------------------------------------------


def plane_mesh(model_id: str, x_range, y_range, nx: int, ny: int) -> TriMesh:
    """Fronto-parallel grid in the model z = 0 plane."""
    xs, ys = np.linspace(*x_range, nx + 1), np.linspace(*y_range, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    verts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    tris = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            tris += [(a, a + 1, a + nx + 2), (a, a + nx + 2, a + nx + 1)]
    return TriMesh(model_id, verts, np.array(tris))


@dataclass
class TwoPlaneImage:
    instances: tuple
    cover: tuple[int, int, int, int]  # pixel block (c0, c1, r0, r1) hidden by the front plane


def two_plane_scene(rng: np.random.Generator, size: int = 64):
    """One scene, two images: a dense front card over a back plane, card moved between images.

    The card's image-space edges sit a quarter pixel inside whole pixel
    boundaries and its vertices are at most half a pixel apart, so the
    occluded region is exactly the pixel block ``cover`` in both the z-buffer
    and the vertex-only sense. Returns ``(Scene, [TwoPlaneImage, TwoPlaneImage])``.
    """
    from objmatch.geometry import rasterize
    from objmatch.sceneio import ImageAnnotation, ModelInfo, Scene, SceneAnnotation

    cam = CameraIntrinsics.default(size, size)
    z_back = float(rng.uniform(0.9, 1.5))
    z_front = float(rng.uniform(0.4, z_back - 0.1))
    lo, hi = rng.uniform(2.3, 10.7, 2), rng.uniform(size - 10.7, size - 2.3, 2)
    back_nx, back_ny = (int(max(1, (hi[k] - lo[k]) / rng.uniform(0.3, 3.0))) for k in range(2))
    back = plane_mesh("back", tuple((lo[0] - cam.cx) * z_back / cam.fx + np.array([0.0, hi[0] - lo[0]]) * z_back / cam.fx),
                      tuple((lo[1] - cam.cy) * z_back / cam.fy + np.array([0.0, hi[1] - lo[1]]) * z_back / cam.fy),
                      back_nx, back_ny)
    w, h = int(rng.integers(4, 16)), int(rng.integers(4, 16))
    # card mesh centered on its model origin; placement is by pose translation in whole pixels
    half_u, half_v = (w - 0.5) / 2, (h - 0.5) / 2
    front = plane_mesh("front", (-half_u * z_front / cam.fx, half_u * z_front / cam.fx),
                       (-half_v * z_front / cam.fy, half_v * z_front / cam.fy),
                       int(np.ceil((w - 0.5) / 0.4)), int(np.ceil((h - 0.5) / 0.4)))
    meshes = {"back": back, "front": front}
    images, annotations, views = {}, [], []
    for k in range(2):
        c0, r0 = int(rng.integers(12, size - 12 - w)), int(rng.integers(12, size - 12 - h))
        center_u, center_v = c0 + w / 2, r0 + h / 2
        t_front = [(center_u - cam.cx) * z_front / cam.fx, (center_v - cam.cy) * z_front / cam.fy, z_front]
        instances = (ObjectInstance("back", RigidPose(np.eye(3), [0, 0, z_back]), 0),
                     ObjectInstance("front", RigidPose(np.eye(3), t_front), 1))
        buf = rasterize(instances, meshes, cam)
        image_id = f"{k:03d}"
        images[image_id] = RgbdImage(np.zeros((size, size, 3), np.uint8), buf.depth_raster(), buf.ids,
                                     DomainTag.SIM, "two_plane", image_id)
        annotations.append(ImageAnnotation(image_id, instances))
        views.append(TwoPlaneImage(instances, (c0, c0 + w, r0, r0 + h)))
    ann = SceneAnnotation("two_plane", DomainTag.SIM, cam,
                          (ModelInfo("back", back.base_color), ModelInfo("front", front.base_color)),
                          tuple(annotations))
    return Scene(ann, meshes, None, images), views


def _hidden(uv: np.ndarray, cover) -> np.ndarray:
    c0, c1, r0, r1 = cover
    col, row = np.floor(uv[:, 0]), np.floor(uv[:, 1])
    return (col >= c0) & (col < c1) & (row >= r0) & (row < r1)


@dataclass
class OcclusionReport:
    occluded_matches: int = 0  # back-plane matches inside the card in A or B
    disagreements: int = 0  # vertices whose visibility differs between modes
    hidden_vertices: int = 0  # back-plane vertices inside the card, so the test is not vacuous
    matches: int = 0


def occlusion_oracle(n: int = 100, seed: int = 0, n_matches: int = 300) -> OcclusionReport:
    """Run ``n`` random two-plane scenes through both occlusion modes."""
    from objmatch.correspond import Dataset, PairingType, PairSpec, SamplingConfig, generate_matches

    rng = seeded_rng(seed)
    out = OcclusionReport()
    for _ in range(n):
        scene, views = two_plane_scene(rng)
        dataset = Dataset([scene])
        spec = PairSpec(PairingType.SIM_SIM, "two_plane", "000", "two_plane", "001", True)
        rec_a, rec_b = dataset.records(spec)
        for rec, view in ((rec_a, views[0]), (rec_b, views[1])):
            zb, vo = rec.projections("zbuffer"), rec.projections("vertex_only")
            out.disagreements += sum(int(np.sum(zb[i].visible != vo[i].visible)) for i in zb)
            out.hidden_vertices += int(np.sum(_hidden(zb[0].uv, view.cover)))
        for mode in ("zbuffer", "vertex_only"):
            ms, _ = generate_matches(rec_a, rec_b, SamplingConfig(n_matches=n_matches, occlusion=mode), rng)
            back = np.array([m == "back" for m in ms.match_models], bool)
            hidden = _hidden(ms.match_a, views[0].cover) | _hidden(ms.match_b, views[1].cover)
            out.occluded_matches += int(np.sum(hidden & back))
            out.matches += ms.n_matches
    return out


def _match_set(a, b, na=None, nb=None) -> MatchSet:
    a, b = np.atleast_2d(np.asarray(a, float)), np.atleast_2d(np.asarray(b, float))
    na = a if na is None else np.atleast_2d(np.asarray(na, float))
    nb = b if nb is None else np.atleast_2d(np.asarray(nb, float))
    return MatchSet(a, b, na, nb, np.zeros(len(na), np.uint8))


def loss_identities(tol: float = 1e-6) -> list[CheckResult]:
    """The hand-computable loss and gradient cases."""
    out = []

    def check(name, got, want):
        ok = bool(np.allclose(np.asarray(got, float), np.asarray(want, float), atol=tol, rtol=0))
        out.append(CheckResult(name, ok, f"got {np.round(np.asarray(got, float), 9).tolist()}, want {want}"))

    # 2 x 1 maps along u: pixel (0, 0) and pixel (1, 0)
    desc_a = np.zeros((1, 2, 2))
    desc_b = np.zeros((1, 2, 2))
    desc_b[0, 0] = (3.0, 4.0)
    check("single match distance 5", match_loss(desc_a, desc_b, [[0.5, 0.5]], [[0.5, 0.5]]), 25.0)
    check("two matches averaged", match_loss(desc_a, desc_b, [[0.5, 0.5], [1.5, 0.5]], [[0.5, 0.5], [1.5, 0.5]]), 12.5)
    same = np.random.default_rng(0).standard_normal((4, 4, 3))
    pix = [[0.5, 0.5], [2.5, 1.5], [3.5, 3.5]]
    check("identical maps self-pair", match_loss(same, same, pix, pix), 0.0)

    cfg = LossConfig(0.5)
    near = np.zeros((1, 2, 2))
    far = np.zeros((1, 2, 2))
    far[0, 0] = (0.3, 0.0)
    far[0, 1] = (0.9, 0.0)
    check("non-match at 0.3", non_match_loss(near, far, [[0.5, 0.5]], [[0.5, 0.5]], cfg), (0.04, 1))
    mixed = non_match_loss(near, far, [[0.5, 0.5], [1.5, 0.5]], [[0.5, 0.5], [1.5, 0.5]], cfg)
    check("mixed active/inactive normalized by active count", mixed, (0.04, 1))
    out.append(CheckResult("mixed case is not halved", abs(mixed[0] - 0.02) > 1e-3, f"loss {mixed[0]}"))
    check("all non-matches beyond margin", non_match_loss(near, far, [[1.5, 0.5]], [[1.5, 0.5]], cfg), (0.0, 0))

    # combined: match 0 -> distance 5 (L_m = 25), non-match at 0.3 (L_nm = 0.04)
    cmb_a = np.zeros((1, 2, 2))
    cmb_b = np.zeros((1, 2, 2))
    cmb_b[0, 0] = (3.0, 4.0)
    cmb_b[0, 1] = (0.3, 0.0)
    ms = _match_set([[0.5, 0.5]], [[0.5, 0.5]], [[1.5, 0.5]], [[1.5, 0.5]])
    check("total is the sum", total_loss(cmb_a, cmb_b, ms, cfg), 25.04)
    terms, grad_a, _ = loss_and_gradients(cmb_a, cmb_b, _match_set([[0.5, 0.5]], [[0.5, 0.5]],
                                                                   [[0.5, 0.5]], [[1.5, 0.5]]), LossConfig(0.1))
    check("match gradient", grad_a[0, 0], (-6.0, -8.0))

    perfect_a = np.zeros((1, 2, 2))
    perfect_b = np.zeros((1, 2, 2))
    perfect_b[0, 1] = (0.7, 0.0)
    check("perfect descriptors", total_loss(perfect_a, perfect_b, _match_set([[0.5, 0.5]], [[0.5, 0.5]],
                                                                              [[0.5, 0.5]], [[1.5, 0.5]]), cfg), 0.0)
    zeros = np.zeros((3, 3, 2))
    zms = _match_set([[0.5, 0.5], [1.5, 2.5]], [[2.5, 0.5], [0.5, 1.5]], [[0.5, 1.5], [2.5, 2.5]], [[1.5, 1.5], [0.5, 0.5]])
    check("all-zero descriptors", total_loss(zeros, zeros, zms, cfg), 0.25)
    inactive = _match_set([[0.5, 0.5]], [[0.5, 0.5]], [[1.5, 0.5]], [[1.5, 0.5]])
    hinge_a = np.zeros((1, 2, 2))
    hinge_b = np.zeros((1, 2, 2))
    hinge_b[0, 0] = (1.0, 0.0)
    hinge_b[0, 1] = (2.0, 0.0)
    _, ga, gb = loss_and_gradients(hinge_a, hinge_b, inactive, cfg)
    check("inactive non-matches add no gradient", [ga[0, 1], gb[0, 1]], [[0.0, 0.0], [0.0, 0.0]])
    return out


def random_match_set(rng: np.random.Generator, width: int, height: int, n_matches: int, n_non: int) -> MatchSet:
    def pix(n):
        return np.stack([rng.uniform(0, width, n), rng.uniform(0, height, n)], axis=1)

    return MatchSet(pix(n_matches), pix(n_matches), pix(n_non), pix(n_non), rng.integers(0, 3, n_non).astype(np.uint8))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over one gradient tensor; 0 when both vanish."""
    analytic = np.asarray(analytic, np.float64).ravel()
    numeric = np.asarray(numeric, np.float64).ravel()
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return float(np.linalg.norm(analytic - numeric) / denom) if denom > 0 else 0.0


def _near_kink(desc_a, desc_b, ms: MatchSet, margin: float, gap: float) -> bool:
    ia = np.floor(ms.non_match_a).astype(int)
    ib = np.floor(ms.non_match_b).astype(int)
    dist = np.linalg.norm(desc_a[ia[:, 1], ia[:, 0]] - desc_b[ib[:, 1], ib[:, 0]], axis=1)
    return bool(np.any(np.abs(dist - margin) < gap))


def loss_gradient_check(trials: int = 100, seed: int = 0, h: float = 1e-3) -> float:
    """Worst relative error of the analytic loss gradient over random 8x8x3 problems."""
    rng = seeded_rng(seed)
    cfg = LossConfig(0.5)
    worst = 0.0
    done = 0
    while done < trials:
        desc_a = rng.uniform(-0.4, 0.4, (8, 8, 3))
        desc_b = rng.uniform(-0.4, 0.4, (8, 8, 3))
        ms = random_match_set(rng, 8, 8, 20, 50)
        if _near_kink(desc_a, desc_b, ms, cfg.margin, 1e-3 + 2 * h):
            continue
        _, grad_a, grad_b = loss_and_gradients(desc_a, desc_b, ms, cfg)
        for desc, grad in ((desc_a, grad_a), (desc_b, grad_b)):
            numeric = np.zeros_like(desc)
            for idx in np.ndindex(desc.shape):
                old = desc[idx]
                desc[idx] = old + h
                up = total_loss(desc_a, desc_b, ms, cfg)
                desc[idx] = old - h
                down = total_loss(desc_a, desc_b, ms, cfg)
                desc[idx] = old
                numeric[idx] = (up - down) / (2 * h)
            worst = max(worst, relative_error(grad, numeric))
        done += 1
    return worst


TOY_NET = DescriptorNetConfig(input_mode="rgbd", hidden=(4, 4), dim=3, init_scale=1.0)


def network_gradient_check(trials: int = 100, seed: int = 0, dtype: str = "float32",
                           h: float = 1e-6, size: int = 8) -> float:
    """Worst relative error of d(total loss)/d(params) against central differences.

    The analytic gradient runs in ``dtype``; the numeric gradient is always taken
    in float64 on the same parameter values, so the float32 figure measures the
    float32 backward pass alone. Trials whose pre-activations or non-match
    distances sit within reach of a kink are redrawn.
    """
    rng = seeded_rng(seed)
    cfg = LossConfig(0.5)
    worst = 0.0
    done = 0
    while done < trials:
        net_cfg = replace(TOY_NET, seed=int(rng.integers(2 ** 31)), dtype=dtype)
        net = DescriptorNet(net_cfg)
        for p in net.params.values():
            if p.ndim == 1:
                p[...] = rng.uniform(-0.1, 0.1, p.shape)
        ref = DescriptorNet(replace(net_cfg, dtype="float64"), net.stats,
                            {k: v.astype(np.float64) for k, v in net.params.items()})
        x = rng.standard_normal((2, size, size, net_cfg.in_channels)).astype(net.dtype)
        ms = random_match_set(rng, size, size, 20, 50)
        out64, cache64 = ref.forward(x.astype(np.float64))
        if min(np.abs(z).min() for z in _preactivations(ref, x.astype(np.float64))) < 1e-4:
            continue
        if _near_kink(out64[0], out64[1], ms, cfg.margin, 1e-4):
            continue
        out, cache = net.forward(x)
        _, ga, gb = loss_and_gradients(out[0], out[1], ms, cfg)
        grads = net.backward(cache, np.stack([ga, gb]))

        def loss64() -> float:
            o, _ = ref.forward(x.astype(np.float64))
            return total_loss(o[0], o[1], ms, cfg)

        analytic, numeric = [], []
        for name, p in ref.params.items():
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = loss64()
                p[idx] = old - h
                down = loss64()
                p[idx] = old
                fd[idx] = (up - down) / (2 * h)
            analytic.append(grads[name].ravel())
            numeric.append(fd.ravel())
        # one vector over every parameter: the bias of the projection has an
        # exactly-zero true gradient (it shifts both descriptors equally)
        worst = max(worst, relative_error(np.concatenate(analytic), np.concatenate(numeric)))
        done += 1
    return worst


def _preactivations(net: DescriptorNet, x: np.ndarray) -> list[np.ndarray]:
    from objmatch.descriptor import _im2col

    zs = []
    a = x
    n, h, w, _ = x.shape
    for i in range(len(net.config.hidden)):
        weight = net.params[f"conv{i}.weight"]
        z = _im2col(a) @ weight.reshape(-1, weight.shape[-1]) + net.params[f"conv{i}.bias"]
        zs.append(z)
        a = np.maximum(z, 0).reshape(n, h, w, -1)
    return zs


def run_selftest(quick: bool = True) -> list[CheckResult]:
    trials = 10 if quick else 100
    results = []
    err, count = projection_oracle(1000)
    results.append(CheckResult("projection oracle", err < 1e-4 and count > 0, f"max error {err:.2e} px over {count} in-bounds"))
    occ = occlusion_oracle(10 if quick else 100)
    results.append(CheckResult("occlusion oracle",
                               occ.occluded_matches == 0 and occ.disagreements == 0 and occ.hidden_vertices > 0,
                               f"{occ.occluded_matches} occluded matches, {occ.disagreements} mode disagreements, "
                               f"{occ.matches} matches, {occ.hidden_vertices} hidden vertices"))
    results += loss_identities()
    lerr = loss_gradient_check(trials)
    results.append(CheckResult("loss finite differences", lerr < 1e-4, f"max relative error {lerr:.2e}"))
    nerr = network_gradient_check(max(2, trials // 5), dtype="float64")
    results.append(CheckResult("network finite differences (float64)", nerr < 1e-6, f"max relative error {nerr:.2e}"))
    if not quick:
        ferr = network_gradient_check(100, dtype="float32")
        results.append(CheckResult("network finite differences (float32)", ferr < 1e-3, f"max relative error {ferr:.2e}"))
    return results
