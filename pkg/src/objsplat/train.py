"""Scene construction and optimization: point fusion, Gaussian init, the
supervised losses (photometric, depth, contrastive grouping, feature and
language distillation), the training loop, and object clustering.

Feature/language supervision is stochastic: each iteration samples a seeded
subset of pixels (feature MSE, contrastive pairs) and Gaussians (language),
so a full-resolution render per iteration only carries color+depth. All
sampling derives from (config.seed, iteration), which makes loss histories
exactly reproducible and lets tests finite-difference the per-iteration
training objective.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d
from scipy.spatial import cKDTree

from .clustering import dbscan_filter, hdbscan
from .errors import EmptyCloud, ShapeMismatch
from .fields import FieldConfig, GroupEmbedder, LanguageField, PcaReducer, pca_fit
from .formats import read_f32, read_png
from .geometry import CameraModel, PoseSE3
from .optim import Adam
from .raster import ChannelMask, OutputGrads, render, render_backward, DEPTH_ALPHA_MIN
from .scene import GaussianScene, SceneConfig


# ---------------------------------------------------------------------------
# dataset


@dataclass
class TrainFrame:
    """One captured training view with its supervision maps."""

    camera: CameraModel
    rgb: np.ndarray  # (H,W,3) float32 in [0,1]
    depth: np.ndarray  # (H,W) float32, 0 = invalid
    instance_mask: np.ndarray  # (H,W) uint8/int, 0 = background/negative
    feature_map: np.ndarray  # (Hf,Wf,raw_dim) float32, strided grid
    feature_stride: int
    language_maps: list[np.ndarray]  # per scale, (Hl,Wl,L) float32, strided
    language_stride: int


@dataclass
class TrainingDataset:
    frames: list[TrainFrame]
    label_names: dict[int, str]
    scales: tuple[float, ...]  # language scales in scene units
    bounds_min: tuple[float, float, float]
    bounds_max: tuple[float, float, float]
    raw_dim: int

    @property
    def image_shape(self) -> tuple[int, int]:
        f = self.frames[0]
        return f.rgb.shape[0], f.rgb.shape[1]


def _camera_from_json(entry: dict) -> CameraModel:
    m = np.asarray(entry["world_to_camera"], dtype=np.float64).reshape(4, 4)
    return CameraModel(
        fx=entry["fx"],
        fy=entry["fy"],
        cx=entry["cx"],
        cy=entry["cy"],
        width=entry["width"],
        height=entry["height"],
        world_to_camera=PoseSE3.from_matrix(m[:3, :3], m[:3, 3]),
    )


def load_dataset(path) -> TrainingDataset:
    """Read the on-disk dataset layout (cameras.json, rgb/, depth/, mask/,
    feat/, lang/s{0..}/ subdirectories). See docs/formats.md."""
    root = Path(path)
    meta = json.loads((root / "cameras.json").read_text())
    frames: list[TrainFrame] = []
    n_scales = len(meta["language_scales"])
    for i, cam_entry in enumerate(meta["frames"]):
        name = f"{i:03d}"
        rgb = read_png(root / "rgb" / f"{name}.png").astype(np.float32) / 255.0
        depth = read_f32(root / "depth" / f"{name}.f32")[:, :, 0]
        mask = read_png(root / "mask" / f"{name}.png").astype(np.int64)
        feat = read_f32(root / "feat" / f"{name}.f32")
        langs = [read_f32(root / "lang" / f"s{k}" / f"{name}.f32") for k in range(n_scales)]
        frames.append(
            TrainFrame(
                camera=_camera_from_json(cam_entry),
                rgb=rgb,
                depth=depth,
                instance_mask=mask,
                feature_map=feat,
                feature_stride=meta["feature_stride"],
                language_maps=langs,
                language_stride=meta["language_stride"],
            )
        )
    return TrainingDataset(
        frames=frames,
        label_names={int(k): v for k, v in meta["label_names"].items()},
        scales=tuple(meta["language_scales"]),
        bounds_min=tuple(meta["bounds_min"]),
        bounds_max=tuple(meta["bounds_max"]),
        raw_dim=frames[0].feature_map.shape[2],
    )


# ---------------------------------------------------------------------------
# point fusion and initialization


def fuse_pointcloud(
    frames: list[TrainFrame], max_points: int = 200_000
) -> tuple[np.ndarray, np.ndarray]:
    """Union of deprojected valid-depth pixels (world frame) with their RGB,
    subsampled to <= max_points by uniform stride."""
    pts: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    for f in frames:
        valid = f.depth > 0
        if not np.any(valid):
            continue
        rows, cs = np.nonzero(valid)
        z = f.depth[rows, cs].astype(np.float64)
        world = f.camera.deproject(cs + 0.5, rows + 0.5, z)
        pts.append(world)
        cols.append(f.rgb[rows, cs].astype(np.float64))
    if not pts:
        raise EmptyCloud("no valid depth pixels in any frame")
    points = np.concatenate(pts, axis=0)
    colors = np.concatenate(cols, axis=0)
    if points.shape[0] > max_points:
        stride = int(np.ceil(points.shape[0] / max_points))
        points = points[::stride]
        colors = colors[::stride]
    return points, colors


def init_scene(
    points: np.ndarray,
    colors: np.ndarray | None = None,
    config: SceneConfig | None = None,
) -> GaussianScene:
    """One isotropic Gaussian per point; scale from the mean distance to the
    3 nearest neighbors (fallback 0.01), opacity logit(0.1), zero features."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        raise EmptyCloud("cannot initialize from an empty point set")
    if config is None:
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        pad = 0.05 * max(float(np.max(hi - lo)), 1e-3)
        config = SceneConfig(
            bounds_min=tuple(lo - pad),
            bounds_max=tuple(hi + pad),
        )
    if n >= 2:
        tree = cKDTree(points)
        k = min(4, n)
        dists, _ = tree.query(points, k=k)
        mean_nn = dists[:, 1:].mean(axis=1)
        mean_nn = np.maximum(mean_nn, 1e-6)
        log_scales = np.log(mean_nn)[:, None].repeat(3, axis=1)
    else:
        log_scales = np.full((n, 3), np.log(0.01))
    rots = np.zeros((n, 4))
    rots[:, 0] = 1.0
    opacity_logits = np.full(n, np.log(0.1 / 0.9))
    if colors is None:
        colors = np.full((n, 3), 0.5)
    features = np.zeros((n, config.feature_dim))
    return GaussianScene(points, rots, log_scales, opacity_logits, colors, features, config)


# ---------------------------------------------------------------------------
# losses


def _gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _ssim_forward(x: np.ndarray, y: np.ndarray, window: np.ndarray):
    """Per-channel SSIM map over the valid convolution region, plus cache."""
    maps = []
    cache = []
    for c in range(x.shape[2]):
        xc = x[:, :, c]
        yc = y[:, :, c]
        ux = convolve2d(xc, window, mode="valid")
        uy = convolve2d(yc, window, mode="valid")
        px = convolve2d(xc * xc, window, mode="valid")
        py = convolve2d(yc * yc, window, mode="valid")
        pxy = convolve2d(xc * yc, window, mode="valid")
        A1 = 2 * ux * uy + _SSIM_C1
        A2 = 2 * (pxy - ux * uy) + _SSIM_C2
        B1 = ux**2 + uy**2 + _SSIM_C1
        B2 = (px - ux**2) + (py - uy**2) + _SSIM_C2
        s = (A1 * A2) / (B1 * B2)
        maps.append(s)
        cache.append((xc, yc, ux, uy, A1, A2, B1, B2, s))
    return np.stack(maps, axis=2), cache


def _ssim_backward(cache, window: np.ndarray, d_per_pixel: float, shape) -> np.ndarray:
    """Gradient of mean(ssim_map)*weight w.r.t. x, d_per_pixel = weight/count."""
    d_x = np.zeros(shape)
    for c, (xc, yc, ux, uy, A1, A2, B1, B2, s) in enumerate(cache):
        inv = d_per_pixel / (B1 * B2)
        dA1 = A2 * inv
        dA2 = A1 * inv
        dB1 = -s * d_per_pixel / B1
        dB2 = -s * d_per_pixel / B2
        d_ux = dA1 * 2 * uy + dA2 * (-2 * uy) + dB1 * 2 * ux + dB2 * (-2 * ux)
        d_px = dB2
        d_pxy = dA2 * 2
        d_x[:, :, c] += convolve2d(d_ux, window, mode="full")
        d_x[:, :, c] += 2 * xc * convolve2d(d_px, window, mode="full")
        d_x[:, :, c] += yc * convolve2d(d_pxy, window, mode="full")
    return d_x


def photometric_loss_grad(
    rendered: np.ndarray, target: np.ndarray, dssim_weight: float = 0.2
) -> tuple[float, np.ndarray]:
    """L1 + dssim_weight*(1 - SSIM) with its gradient w.r.t. the render.

    SSIM uses an 11x11 Gaussian window (sigma 1.5, standard constants),
    shrunk to fit images smaller than the window.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {target.shape}")
    diff = rendered - target
    n = diff.size
    l1 = float(np.abs(diff).mean())
    d = np.sign(diff) / n
    if dssim_weight == 0.0:
        return l1, d
    wsize = min(11, rendered.shape[0], rendered.shape[1])
    if wsize % 2 == 0:
        wsize -= 1
    window = _gaussian_window(wsize)
    smap, cache = _ssim_forward(rendered, target, window)
    ssim_mean = float(smap.mean())
    d += _ssim_backward(cache, window, -dssim_weight / smap.size, rendered.shape)
    return l1 + dssim_weight * (1.0 - ssim_mean), d


def photometric_loss(rendered: np.ndarray, target: np.ndarray) -> float:
    return photometric_loss_grad(rendered, target)[0]


def depth_loss_grad(
    rendered_depth: np.ndarray, target_depth: np.ndarray, validity: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean L1 over pixels valid on both sides (target > 0 and ``validity``,
    the rendered-coverage mask). Zero valid pixels -> loss 0."""
    rendered_depth = np.asarray(rendered_depth, dtype=np.float64)
    target_depth = np.asarray(target_depth, dtype=np.float64)
    if rendered_depth.shape != target_depth.shape:
        raise ShapeMismatch(f"{rendered_depth.shape} vs {target_depth.shape}")
    valid = np.asarray(validity, dtype=bool) & (target_depth > 0)
    count = int(valid.sum())
    grad = np.zeros_like(rendered_depth)
    if count == 0:
        return 0.0, grad
    diff = rendered_depth - target_depth
    loss = float(np.abs(diff[valid]).mean())
    grad[valid] = np.sign(diff[valid]) / count
    return loss, grad


def depth_loss(rendered_depth, target_depth, validity) -> float:
    return depth_loss_grad(rendered_depth, target_depth, validity)[0]


def feature_distill_loss_grad(
    rendered_feature: np.ndarray, target_feature: np.ndarray, validity: np.ndarray
) -> tuple[float, np.ndarray]:
    """Per-element MSE over valid pixels of the reduced target features."""
    rendered_feature = np.asarray(rendered_feature, dtype=np.float64)
    target_feature = np.asarray(target_feature, dtype=np.float64)
    if rendered_feature.shape != target_feature.shape:
        raise ShapeMismatch(f"{rendered_feature.shape} vs {target_feature.shape}")
    valid = np.asarray(validity, dtype=bool)
    grad = np.zeros_like(rendered_feature)
    count = int(valid.sum()) * rendered_feature.shape[-1]
    if count == 0:
        return 0.0, grad
    diff = (rendered_feature - target_feature)[valid]
    loss = float(np.mean(diff**2))
    grad[valid] = 2.0 * diff / count
    return loss, grad


def feature_distill_loss(rendered_feature, target_feature, validity) -> float:
    return feature_distill_loss_grad(rendered_feature, target_feature, validity)[0]


def sample_contrastive_pairs(
    instance_mask: np.ndarray, pairs_per_iter: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-index pairs for the contrastive objective.

    The first element of every pair is an object pixel (id >= 1); the second
    is drawn from all labeled pixels, so negative-mask pixels only ever act
    as repulsion partners. pairs_per_iter == 0 enumerates every such pair.
    Returns flat pixel indices (a_idx, b_idx); empty arrays if no objects.
    """
    mask = np.asarray(instance_mask).reshape(-1)
    obj_idx = np.nonzero(mask > 0)[0]
    all_idx = np.arange(mask.size)
    if obj_idx.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    if pairs_per_iter == 0:
        a = np.repeat(obj_idx, all_idx.size)
        b = np.tile(all_idx, obj_idx.size)
        keep = a != b
        return a[keep], b[keep]
    a = rng.choice(obj_idx, size=pairs_per_iter, replace=True)
    b = rng.choice(all_idx, size=pairs_per_iter, replace=True)
    keep = a != b
    return a[keep], b[keep]


def contrastive_pair_loss(
    fa: np.ndarray, fb: np.ndarray, same: np.ndarray, margin: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Pull/push margin loss on feature pairs with gradients.

    mean over same-id pairs of ||fa-fb||^2 plus mean over different-id pairs
    of max(0, margin - ||fa-fb||)^2.
    """
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    diff = fa - fb
    d_fa = np.zeros_like(fa)
    d_fb = np.zeros_like(fb)
    loss = 0.0
    n_pull = int(same.sum())
    if n_pull:
        sq = np.sum(diff[same] ** 2, axis=1)
        loss += float(sq.mean())
        g = 2.0 * diff[same] / n_pull
        d_fa[same] += g
        d_fb[same] -= g
    push = ~same
    n_push = int(push.sum())
    if n_push:
        dist = np.linalg.norm(diff[push], axis=1)
        viol = np.maximum(margin - dist, 0.0)
        loss += float(np.mean(viol**2))
        scale = np.where(dist > 1e-12, -2.0 * viol / np.maximum(dist, 1e-12), 0.0) / n_push
        g = scale[:, None] * diff[push]
        d_fa[push] += g
        d_fb[push] -= g
    return loss, d_fa, d_fb


def contrastive_group_loss(
    rendered_group: np.ndarray,
    instance_mask: np.ndarray,
    pairs_per_iter: int,
    margin: float,
    rng: np.random.Generator | None = None,
) -> float:
    """Spec-shaped entry point over a full rendered grouping image."""
    rendered_group = np.asarray(rendered_group, dtype=np.float64)
    h, w, dim = rendered_group.shape
    mask = np.asarray(instance_mask)
    if mask.shape != (h, w):
        raise ShapeMismatch(f"mask {mask.shape} vs group image {(h, w)}")
    if not np.any(mask > 0):
        warnings.warn("contrastive loss: no labeled object pixels", stacklevel=2)
        return 0.0
    rng = rng or np.random.default_rng(0)
    a, b = sample_contrastive_pairs(mask, pairs_per_iter, rng)
    flat = rendered_group.reshape(-1, dim)
    mflat = mask.reshape(-1)
    same = mflat[a] == mflat[b]
    loss, _, _ = contrastive_pair_loss(flat[a], flat[b], same, margin)
    return loss


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    # loss weights
    w_rgb: float = 1.0
    w_dssim: float = 0.2
    w_depth: float = 0.5
    w_group: float = 1.0
    w_feat: float = 1.0
    w_lang: float = 0.5
    margin: float = 1.0
    pairs_per_iter: int = 4096
    feat_samples_per_iter: int = 8192
    lang_samples_per_iter: int = 1024
    # learning rates per parameter class
    lr_means: float = 2e-4
    lr_rots: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_features: float = 5e-3
    lr_fields: float = 5e-3
    # scene budget and field sizing for CPU runs
    max_gaussians: int = 9000
    field_table_log2: int = 15
    group_dim: int = 16
    lang_levels: int = 6
    occlusion_gate: float = 0.05

    def validate(self) -> None:
        weights = (self.w_rgb, self.w_dssim, self.w_depth, self.w_group, self.w_feat, self.w_lang)
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be >= 0")


@dataclass
class TrainResult:
    scene: GaussianScene
    group_field: GroupEmbedder
    lang_field: LanguageField
    pca: PcaReducer
    history: np.ndarray  # rows: iter, total, rgb, depth, group, feat, lang

    def history_csv(self) -> str:
        lines = ["iter,total,rgb,depth,group,feat,lang"]
        for row in self.history:
            lines.append(
                f"{int(row[0])},"
                + ",".join(f"{v:.8g}" for v in row[1:])
            )
        return "\n".join(lines) + "\n"


def _project_quat_grads(rots: np.ndarray, d_quats: np.ndarray) -> np.ndarray:
    """Chain snapshot-quat gradients onto stored quaternion entries.

    The snapshot normalizes and sign-canonicalizes (w >= 0); the chain is
    sign * (I - qq^T) / |r| applied to the upstream gradient.
    """
    q = rots.astype(np.float64)
    norms = np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    sign = np.where(q[:, :1] < 0, -1.0, 1.0)
    qn = sign * q / norms
    inner = np.sum(d_quats * qn, axis=1, keepdims=True)
    return sign * (d_quats - qn * inner) / norms


def _accumulate(total: dict[str, np.ndarray], grads, weight: float) -> None:
    pairs = (
        ("means", grads.d_means),
        ("rots", grads.d_quats),
        ("log_scales", grads.d_log_scales),
        ("opacity_logits", grads.d_opacity_logits),
        ("colors", grads.d_colors),
        ("features", grads.d_features),
    )
    for name, g in pairs:
        if g is not None:
            total[name] += weight * g


def training_losses_and_grads(
    scene: GaussianScene,
    group_field: GroupEmbedder,
    lang_field: LanguageField,
    frame: TrainFrame,
    scales: tuple[float, ...],
    config: TrainConfig,
    sample_seed: int,
    pca_targets: bool = True,
):
    """One iteration's objective: weighted losses plus gradients for every
    parameter class. Pure given (inputs, sample_seed); the training loop and
    the finite-difference tests both call this."""
    rng = np.random.default_rng(sample_seed)
    cam = frame.camera
    means64 = scene.means.astype(np.float64)

    g_cache: dict = {}
    groups = group_field.embed(means64, cache=g_cache)
    snap = scene.posed_snapshot(groups=groups.astype(np.float32))

    totals = {
        "means": np.zeros((scene.count, 3)),
        "rots": np.zeros((scene.count, 4)),
        "log_scales": np.zeros((scene.count, 3)),
        "opacity_logits": np.zeros(scene.count),
        "colors": np.zeros((scene.count, 3)),
        "features": np.zeros((scene.count, scene.config.feature_dim)),
    }
    field_grads: dict[str, np.ndarray] = {}

    # color + depth on the full frame
    out_cd = render(snap, cam, ChannelMask(color=True, depth=True))
    rgb_loss, d_l1 = photometric_loss_grad(out_cd.color, frame.rgb, 0.0)
    d_color = config.w_rgb * d_l1
    rgb_term = config.w_rgb * rgb_loss
    if config.w_dssim > 0.0:
        wsize = min(11, frame.rgb.shape[0], frame.rgb.shape[1])
        if wsize % 2 == 0:
            wsize -= 1
        window = _gaussian_window(wsize)
        smap, ssim_cache = _ssim_forward(
            out_cd.color.astype(np.float64), frame.rgb.astype(np.float64), window
        )
        rgb_term += config.w_dssim * (1.0 - float(smap.mean()))
        d_color = d_color + _ssim_backward(
            ssim_cache, window, -config.w_dssim / smap.size, out_cd.color.shape
        )

    depth_val, d_depth = depth_loss_grad(
        out_cd.depth, frame.depth, out_cd.alpha >= DEPTH_ALPHA_MIN
    )
    grads_cd = render_backward(
        snap, cam, out_cd,
        OutputGrads(color=d_color, depth=config.w_depth * d_depth),
    )
    _accumulate(totals, grads_cd, 1.0)

    # feature distillation on a sampled pixel subset (targets already reduced)
    feat_map = frame.feature_map
    hf, wf = feat_map.shape[:2]
    stride = frame.feature_stride
    n_samp = min(config.feat_samples_per_iter, hf * wf)
    cells = rng.choice(hf * wf, size=n_samp, replace=False)
    cr, cc = cells // wf, cells % wf
    px = np.stack([cr * stride + stride // 2, cc * stride + stride // 2], axis=1)
    out_f = render(snap, cam, ChannelMask(color=False, depth=False, feature=True), pixels=px)
    targets = feat_map[cr, cc].astype(np.float64)
    feat_val, d_feat = feature_distill_loss_grad(
        out_f.feature, targets, out_f.alpha >= DEPTH_ALPHA_MIN
    )
    grads_f = render_backward(
        snap, cam, out_f, OutputGrads(feature=config.w_feat * d_feat)
    )
    _accumulate(totals, grads_f, 1.0)

    # contrastive grouping on sampled pixel pairs
    a_idx, b_idx = sample_contrastive_pairs(
        frame.instance_mask, config.pairs_per_iter, rng
    )
    group_val = 0.0
    if a_idx.size:
        uniq, inverse = np.unique(np.concatenate([a_idx, b_idx]), return_inverse=True)
        gpx = np.stack([uniq // cam.width, uniq % cam.width], axis=1)
        out_g = render(snap, cam, ChannelMask(color=False, depth=False, group=True), pixels=gpx)
        feats = out_g.group.astype(np.float64)
        ia = inverse[: a_idx.size]
        ib = inverse[a_idx.size :]
        mflat = frame.instance_mask.reshape(-1)
        same = mflat[a_idx] == mflat[b_idx]
        group_val, d_fa, d_fb = contrastive_pair_loss(feats[ia], feats[ib], same, config.margin)
        d_gpix = np.zeros_like(feats)
        np.add.at(d_gpix, ia, config.w_group * d_fa)
        np.add.at(d_gpix, ib, config.w_group * d_fb)
        grads_g = render_backward(snap, cam, out_g, OutputGrads(group=d_gpix))
        _accumulate(totals, grads_g, 1.0)
        if grads_g.d_groups is not None:
            emb_grads = group_field.embed_backward(g_cache, grads_g.d_groups)
            totals["means"] += emb_grads.pop("x")
            for name, g in emb_grads.items():
                key = f"group_field.{name}"
                field_grads[key] = field_grads.get(key, 0.0) + g

    # language distillation at sampled Gaussian means, nearest-pixel targets
    lang_val = 0.0
    n_lang = min(config.lang_samples_per_iter, scene.count)
    lidx = rng.choice(scene.count, size=n_lang, replace=False)
    uv, z = cam.project_points(means64[lidx])
    cols_px = np.floor(uv[:, 0]).astype(np.int64)
    rows_px = np.floor(uv[:, 1]).astype(np.int64)
    h, w = frame.depth.shape
    ok = (z > 1e-4) & (cols_px >= 0) & (cols_px < w) & (rows_px >= 0) & (rows_px < h)
    if np.any(ok):
        frame_z = frame.depth[rows_px[ok], cols_px[ok]]
        visible = (frame_z > 0) & (np.abs(frame_z - z[ok]) < config.occlusion_gate)
        sel = lidx[ok][visible]
        rr = rows_px[ok][visible] // frame.language_stride
        cc2 = cols_px[ok][visible] // frame.language_stride
        if sel.size:
            per_scale = 1.0 / (len(scales) * sel.size)
            for k, s in enumerate(scales):
                lmap = frame.language_maps[k]
                rrc = np.clip(rr, 0, lmap.shape[0] - 1)
                ccc = np.clip(cc2, 0, lmap.shape[1] - 1)
                target = lmap[rrc, ccc].astype(np.float64)
                l_cache: dict = {}
                y = lang_field.embed(means64[sel], s, cache=l_cache)
                cos = np.sum(y * target, axis=1)
                lang_val += float(np.sum(1.0 - cos) * per_scale)
                d_y = -target * per_scale
                lg = lang_field.embed_backward(l_cache, d_y)
                dx = lg.pop("x")
                lg.pop("extra", None)
                np.add.at(totals["means"], sel, config.w_lang * dx)
                for name, g in lg.items():
                    key = f"lang_field.{name}"
                    field_grads[key] = field_grads.get(key, 0.0) + config.w_lang * g

    totals["rots"] = _project_quat_grads(scene.rots, totals["rots"])
    loss_terms = {
        "rgb": rgb_term,
        "depth": config.w_depth * depth_val,
        "group": config.w_group * group_val,
        "feat": config.w_feat * feat_val,
        "lang": config.w_lang * lang_val,
    }
    loss_terms["total"] = sum(loss_terms.values())
    return loss_terms, totals, field_grads


def reduce_dataset_features(dataset: TrainingDataset, pca: PcaReducer) -> None:
    """Replace raw backbone maps with their PCA-reduced counterparts in place."""
    for f in dataset.frames:
        hf, wf, d = f.feature_map.shape
        flat = f.feature_map.reshape(-1, d)
        f.feature_map = pca.project(flat).reshape(hf, wf, pca.out_dim).astype(np.float32)


def fit_dataset_pca(
    dataset: TrainingDataset, out_dim: int = 64, samples: int = 50_000, seed: int = 0
) -> PcaReducer:
    rng = np.random.default_rng(seed)
    per_frame = max(samples // len(dataset.frames), out_dim)
    rows = []
    for f in dataset.frames:
        flat = f.feature_map.reshape(-1, f.feature_map.shape[2])
        take = min(per_frame, flat.shape[0])
        rows.append(flat[rng.choice(flat.shape[0], size=take, replace=False)])
    return pca_fit(np.concatenate(rows, axis=0), out_dim=out_dim)


def train_scene(dataset: TrainingDataset, config: TrainConfig) -> TrainResult:
    """Full training: PCA, fusion, init, then Adam over the weighted losses."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    feature_dim = min(64, dataset.raw_dim)
    if dataset.frames[0].feature_map.shape[2] != feature_dim:
        pca = fit_dataset_pca(dataset, out_dim=feature_dim, seed=config.seed)
        reduce_dataset_features(dataset, pca)
    else:
        # dataset already reduced (idempotent reentry)
        pca = PcaReducer(
            mean=np.zeros(feature_dim),
            basis=np.eye(feature_dim),
            explained_variance=np.ones(feature_dim),
        )

    points, colors = fuse_pointcloud(dataset.frames, max_points=config.max_gaussians * 4)
    points, keep = dbscan_filter(points, eps=0.01, min_pts=8)
    colors = colors[keep]
    if points.shape[0] > config.max_gaussians:
        stride = int(np.ceil(points.shape[0] / config.max_gaussians))
        points = points[::stride]
        colors = colors[::stride]
    scene_cfg = SceneConfig(
        feature_dim=feature_dim,
        group_dim=config.group_dim,
        lang_dim=dataset.frames[0].language_maps[0].shape[2],
        bounds_min=tuple(dataset.bounds_min),
        bounds_max=tuple(dataset.bounds_max),
        seed=config.seed,
    )
    scene = init_scene(points, colors, scene_cfg)

    group_field = GroupEmbedder(
        dataset.bounds_min,
        dataset.bounds_max,
        FieldConfig(
            table_size_log2=config.field_table_log2,
            out_dim=config.group_dim,
            seed=config.seed,
        ),
    )
    lang_field = LanguageField(
        dataset.bounds_min,
        dataset.bounds_max,
        FieldConfig(
            levels=config.lang_levels,
            table_size_log2=config.field_table_log2,
            out_dim=scene_cfg.lang_dim,
            seed=config.seed + 1,
        ),
    )

    opt = Adam()
    opt.register("means", scene.means, config.lr_means)
    opt.register("rots", scene.rots, config.lr_rots)
    opt.register("log_scales", scene.log_scales, config.lr_log_scales)
    opt.register("opacity_logits", scene.opacity_logits, config.lr_opacity)
    opt.register("colors", scene.colors, config.lr_colors)
    opt.register("features", scene.features, config.lr_features)
    for prefix, fld in (("group_field", group_field), ("lang_field", lang_field)):
        for name, arr in fld.parameters().items():
            opt.register(f"{prefix}.{name}", arr, config.lr_fields)

    history = np.zeros((config.iterations, 7))
    order = rng.permutation(len(dataset.frames))
    for it in range(config.iterations):
        frame = dataset.frames[order[it % len(order)]]
        terms, totals, field_grads = training_losses_and_grads(
            scene, group_field, lang_field, frame, dataset.scales, config,
            sample_seed=config.seed * 1_000_003 + it,
        )
        grads = {**totals, **field_grads}
        opt.step(grads)
        norms = np.linalg.norm(scene.rots.astype(np.float64), axis=1, keepdims=True)
        scene.rots[:] = (scene.rots / np.maximum(norms, 1e-12)).astype(np.float32)
        np.clip(scene.colors, 0.0, 1.0, out=scene.colors)
        history[it] = (
            it, terms["total"], terms["rgb"], terms["depth"],
            terms["group"], terms["feat"], terms["lang"],
        )
    return TrainResult(scene, group_field, lang_field, pca, history)


def cluster_objects(
    scene: GaussianScene,
    group_field: GroupEmbedder,
    min_cluster_size: int = 50,
    min_samples: int = 10,
) -> np.ndarray:
    """Partition the scene by HDBSCAN over per-Gaussian grouping embeddings.

    Noise becomes background; every retained cluster becomes an ObjectCluster
    with a centroid canonical frame. Labels are renumbered by descending size
    (centroid lexicographic tiebreak) so the partition is permutation-stable.
    """
    emb = group_field.embed(scene.means.astype(np.float64))
    labels = hdbscan(emb, min_cluster_size=min_cluster_size, min_samples=min_samples)
    uniq = [int(u) for u in np.unique(labels) if u >= 0]
    if not uniq:
        warnings.warn("cluster_objects: HDBSCAN found no clusters; all background")
        scene.assign_clusters(np.full(scene.count, -1))
        return labels
    stats = []
    for u in uniq:
        idx = labels == u
        centroid = scene.means[idx].astype(np.float64).mean(axis=0)
        stats.append((-int(idx.sum()), tuple(np.round(centroid, 9)), u))
    remap = {old: new for new, (_, _, old) in enumerate(sorted(stats))}
    relabeled = np.array([remap.get(int(v), -1) for v in labels], dtype=np.int64)
    scene.assign_clusters(relabeled)
    return relabeled
