"""Synthetic scenes, datasets, and oracle observation frames.

Everything here is a pure function of (spec, seed): scenes are tabletop
arrangements of surface-sampled Gaussian objects with well-separated unit
feature signatures; datasets render hemisphere captures through the real
rasterizer and write the training layout; frame sources render depth and
backbone-style feature observations of the *current* true scene state for
the tracking and servoing experiments, with deterministic per-pixel noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSceneSpec
from .fields import FeatureProvider, StubTextEmbedder, TextEmbedder
from .formats import write_f32, write_png
from .geometry import CameraModel, PoseSE3
from .raster import ChannelMask, render
from .scene import GaussianScene, SceneConfig, SceneSnapshot

_COLOR_NAMES = ["red", "green", "blue", "yellow", "purple"]
_COLOR_VALUES = np.array(
    [[0.85, 0.15, 0.15], [0.15, 0.75, 0.2], [0.2, 0.3, 0.85], [0.9, 0.85, 0.2], [0.6, 0.2, 0.7]]
)
_SHAPE_NOUNS = {"box": "box", "ellipsoid-cluster": "blob", "L-shape": "bracket"}
BACKGROUND_TOKEN = "background"


@dataclass
class SceneSpec:
    """Tabletop scene description; all randomness derives from seed."""

    n_objects: int = 3
    shapes: tuple[str, ...] = ("box", "ellipsoid-cluster", "L-shape")
    size_range: tuple[float, float] = (0.12, 0.22)
    gaussians_per_object: tuple[int, int] = (600, 1100)
    table_halfextent: float = 0.55
    table_gaussians: int = 2400
    feature_dim: int = 64
    max_signature_cosine: float = 0.3
    feature_noise: float = 0.05
    seed: int = 42

    def validate(self) -> None:
        if not 1 <= self.n_objects <= 5:
            raise InvalidSceneSpec("n_objects must be in 1..5")
        if any(s not in _SHAPE_NOUNS for s in self.shapes):
            raise InvalidSceneSpec(f"unknown shape in {self.shapes}")
        if self.size_range[0] <= 0 or self.size_range[0] > self.size_range[1]:
            raise InvalidSceneSpec("bad size_range")
        if not 0 < self.max_signature_cosine < 1:
            raise InvalidSceneSpec("max_signature_cosine must be in (0,1)")


@dataclass
class CaptureSpec:
    """Hemisphere capture parameters for dataset generation."""

    n_views: int = 35
    radius_factor: float = 1.2
    elevation_deg: tuple[float, float] = (20.0, 70.0)
    image_size: tuple[int, int] = (256, 256)
    depth_sigma: float = 0.0
    feature_sigma: float = 0.02
    raw_dim: int = 96
    feature_stride: int = 2
    language_stride: int = 4
    embed_seed: int = 7

    def validate(self) -> None:
        if self.n_views < 4:
            raise InvalidSceneSpec("n_views must be >= 4")


@dataclass
class SceneObject:
    """Ground-truth object metadata emitted by generate_scene."""

    id: int
    name: str
    shape: str
    center: np.ndarray
    signature: np.ndarray


def _separated_signatures(
    count: int, dim: int, max_cos: float, rng: np.random.Generator
) -> np.ndarray:
    sigs: list[np.ndarray] = []
    while len(sigs) < count:
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ s)) < max_cos for s in sigs):
            sigs.append(v)
    return np.stack(sigs)


def _quat_from_z_to(normal: np.ndarray) -> np.ndarray:
    """Quaternion rotating +z onto ``normal`` (unit)."""
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(z, normal))
    if c > 1.0 - 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    if c < -1.0 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    axis = np.cross(z, normal)
    axis /= np.linalg.norm(axis)
    half = 0.5 * np.arccos(np.clip(c, -1, 1))
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def _sample_box_surface(rng, half: np.ndarray, count: int):
    """Uniform surface samples of an axis-aligned box; returns (pts, normals)."""
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]).repeat(2)
    probs = areas / areas.sum()
    faces = rng.choice(6, size=count, p=probs)
    pts = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
    normals = np.zeros((count, 3))
    for f in range(6):
        axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
        m = faces == f
        pts[m, axis] = sign * half[axis]
        normals[m, axis] = sign
    return pts, normals


def _sample_object(rng, shape: str, size: float, count: int):
    """Surface point cloud + normals for one object, centered, base at z=0."""
    if shape == "box":
        half = np.array([size * 0.5, size * 0.4, size * 0.35])
        pts, normals = _sample_box_surface(rng, half, count)
        pts[:, 2] += half[2]
    elif shape == "ellipsoid-cluster":
        n_lobes = 3
        centers = rng.uniform(-0.25, 0.25, size=(n_lobes, 3)) * size
        centers[:, 2] = np.abs(centers[:, 2]) + size * 0.25
        radii = rng.uniform(0.2, 0.35, size=(n_lobes, 3)) * size
        lobe = rng.integers(0, n_lobes, size=count)
        dirs = rng.normal(size=(count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = centers[lobe] + dirs * radii[lobe]
        normals = dirs / radii[lobe]  # gradient direction of the ellipsoid
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        pts[:, 2] = np.maximum(pts[:, 2], 0.0)
    elif shape == "L-shape":
        half_a = np.array([size * 0.5, size * 0.18, size * 0.18])
        half_b = np.array([size * 0.18, size * 0.18, size * 0.45])
        n_a = count // 2
        pa, na = _sample_box_surface(rng, half_a, n_a)
        pa[:, 2] += half_a[2]
        pb, nb = _sample_box_surface(rng, half_b, count - n_a)
        pb[:, 0] += half_a[0] - half_b[0]
        pb[:, 2] += half_b[2]
        pts = np.vstack([pa, pb])
        normals = np.vstack([na, nb])
    else:  # pragma: no cover - guarded by validate()
        raise InvalidSceneSpec(shape)
    return pts, normals


def generate_scene(spec: SceneSpec) -> tuple[GaussianScene, list[SceneObject]]:
    """Ground-truth scene with object clusters plus per-object metadata."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sigs = _separated_signatures(
        spec.n_objects + 1, spec.feature_dim, spec.max_signature_cosine, rng
    )

    all_pts, all_quats, all_scales, all_colors, all_feats, labels = [], [], [], [], [], []
    objects: list[SceneObject] = []

    # object placement on a ring to avoid interpenetration
    angles = rng.uniform(0, 2 * np.pi) + np.linspace(0, 2 * np.pi, spec.n_objects, endpoint=False)
    ring = spec.table_halfextent * 0.45

    for i in range(spec.n_objects):
        shape = spec.shapes[i % len(spec.shapes)]
        size = rng.uniform(*spec.size_range)
        count = int(rng.integers(*spec.gaussians_per_object))
        pts, normals = _sample_object(rng, shape, size, count)
        yaw = rng.uniform(0, 2 * np.pi)
        R = PoseSE3.from_axis_angle([0, 0, 1], yaw).rotation_matrix()
        center = np.array([ring * np.cos(angles[i]), ring * np.sin(angles[i]), 0.0])
        pts = pts @ R.T + center
        normals = normals @ R.T

        spacing = np.sqrt(6 * size * size / count)
        quats = np.stack([_quat_from_z_to(nrm) for nrm in normals])
        scales = np.log(np.tile([spacing, spacing, spacing * 0.25], (count, 1)))
        color_idx = i % len(_COLOR_NAMES)
        colors = _COLOR_VALUES[color_idx] + rng.uniform(-0.05, 0.05, size=(count, 3))
        noise = rng.normal(scale=spec.feature_noise, size=(count, spec.feature_dim))
        noise -= np.outer(noise @ sigs[i], sigs[i])  # tangential only
        feats = sigs[i] + noise
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)

        all_pts.append(pts)
        all_quats.append(quats)
        all_scales.append(scales)
        all_colors.append(np.clip(colors, 0.0, 1.0))
        all_feats.append(feats)
        labels.append(np.full(count, i))
        objects.append(
            SceneObject(
                id=i,
                name=f"{_COLOR_NAMES[color_idx]} {_SHAPE_NOUNS[shape]}",
                shape=shape,
                center=center,
                signature=sigs[i],
            )
        )

    # table plane (background)
    tcount = spec.table_gaussians
    tpts = np.zeros((tcount, 3))
    tpts[:, 0] = rng.uniform(-spec.table_halfextent, spec.table_halfextent, size=tcount)
    tpts[:, 1] = rng.uniform(-spec.table_halfextent, spec.table_halfextent, size=tcount)
    tspacing = 2 * spec.table_halfextent / np.sqrt(tcount)
    tquats = np.tile([1.0, 0.0, 0.0, 0.0], (tcount, 1))
    tscales = np.log(np.tile([tspacing, tspacing, tspacing * 0.2], (tcount, 1)))
    tcolors = np.clip(0.55 + rng.uniform(-0.04, 0.04, size=(tcount, 3)), 0, 1)
    tnoise = rng.normal(scale=spec.feature_noise, size=(tcount, spec.feature_dim))
    tnoise -= np.outer(tnoise @ sigs[-1], sigs[-1])
    tfeats = sigs[-1] + tnoise
    tfeats /= np.linalg.norm(tfeats, axis=1, keepdims=True)

    all_pts.append(tpts)
    all_quats.append(tquats)
    all_scales.append(tscales)
    all_colors.append(tcolors)
    all_feats.append(tfeats)
    labels.append(np.full(tcount, -1))

    means = np.vstack(all_pts)
    lo = means.min(axis=0)
    hi = means.max(axis=0)
    pad = 0.05 * float(np.max(hi - lo))
    cfg = SceneConfig(
        feature_dim=spec.feature_dim,
        bounds_min=tuple(lo - pad),
        bounds_max=tuple(hi + pad),
        seed=spec.seed,
    )
    scene = GaussianScene(
        means=means,
        rots=np.vstack(all_quats),
        log_scales=np.vstack(all_scales),
        opacity_logits=np.full(means.shape[0], 3.0),  # sigmoid(3) ~ 0.95, solid
        colors=np.vstack(all_colors),
        features=np.vstack(all_feats),
        config=cfg,
    )
    scene.assign_clusters(np.concatenate(labels))
    return scene, objects


def hemisphere_cameras(
    scene: GaussianScene, capture: CaptureSpec, seed: int | None = None
) -> list[CameraModel]:
    """n_views look-at cameras on a hemisphere above the scene center."""
    lo = np.asarray(scene.config.bounds_min)
    hi = np.asarray(scene.config.bounds_max)
    center = 0.5 * (lo + hi)
    radius = capture.radius_factor * scene.config.diagonal
    w, h = capture.image_size
    fx = 1.1 * w
    cams = []
    lo_el, hi_el = np.deg2rad(capture.elevation_deg)
    for k in range(capture.n_views):
        az = 2 * np.pi * k / capture.n_views
        el = lo_el + (hi_el - lo_el) * ((k * 5) % capture.n_views) / max(capture.n_views - 1, 1)
        eye = center + radius * np.array(
            [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)]
        )
        cams.append(
            CameraModel.look_at(eye, center, up=[0, 0, 1], fx=fx, fy=fx, width=w, height=h)
        )
    return cams


def _raw_embedding(raw_dim: int, feature_dim: int, seed: int) -> np.ndarray:
    """Fixed orthonormal embedding of the 64-d signature space into raw_dim."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(raw_dim, raw_dim)))
    return q[:, :feature_dim].astype(np.float64)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> np.uint64(31))


def hash_normals(key: int, indices: np.ndarray, channels: int) -> np.ndarray:
    """Deterministic per-(index, channel) standard normals, order independent.

    Box-Muller over two splitmix64 streams; used for observation noise so a
    pixel keeps the same noise no matter which subset of a frame is gathered.
    """
    idx = np.repeat(np.asarray(indices, dtype=np.uint64) * np.uint64(channels), channels)
    idx = idx + np.tile(np.arange(channels, dtype=np.uint64), len(indices))
    base = _splitmix64(idx ^ np.uint64(key & 0xFFFFFFFFFFFFFFFF))
    u1 = (_splitmix64(base) >> np.uint64(11)).astype(np.float64) / float(1 << 53)
    u2 = (_splitmix64(base ^ np.uint64(0xDEADBEEF)) >> np.uint64(11)).astype(np.float64) / float(
        1 << 53
    )
    u1 = np.maximum(u1, 1e-12)
    return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2 * np.pi * u2)).reshape(len(indices), channels)


class SyntheticOracleProvider(FeatureProvider):
    """Renders raw backbone-style feature maps from a reference scene.

    The per-Gaussian 64-d signatures are lifted through a fixed orthonormal
    embedding to raw_dim, rasterized, and perturbed with deterministic
    Gaussian pixel noise.
    """

    def __init__(
        self,
        scene: GaussianScene,
        raw_dim: int = 96,
        noise_sigma: float = 0.0,
        seed: int = 7,
    ) -> None:
        self.scene = scene
        self.raw_dim = raw_dim
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.embedding = _raw_embedding(raw_dim, scene.config.feature_dim, seed)

    def _snapshot(self) -> SceneSnapshot:
        snap = self.scene.posed_snapshot()
        raw = (snap.features.astype(np.float64) @ self.embedding.T).astype(np.float32)
        snap.features = raw
        return snap

    def features(self, frame_id: int, cam: CameraModel) -> np.ndarray:
        snap = self._snapshot()
        out = render(snap, cam, ChannelMask(color=False, depth=False, feature=True))
        feat = out.feature.astype(np.float64)
        if self.noise_sigma > 0:
            idx = np.arange(cam.height * cam.width, dtype=np.uint64)
            noise = hash_normals(self.seed * 7919 + frame_id, idx, self.raw_dim)
            feat += self.noise_sigma * noise.reshape(cam.height, cam.width, self.raw_dim)
        return feat.astype(np.float32)


def generate_dataset(
    scene: GaussianScene,
    objects: list[SceneObject],
    capture: CaptureSpec,
    out_dir,
    embedder: TextEmbedder | None = None,
) -> None:
    """Render the hemisphere capture and write the training dataset layout."""
    capture.validate()
    out = Path(out_dir)
    for sub in ("rgb", "depth", "mask", "feat"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    scales = tuple(float(f * scene.config.diagonal) for f in (0.1, 0.25, 0.5))
    for k in range(len(scales)):
        (out / "lang" / f"s{k}").mkdir(parents=True, exist_ok=True)

    lang_dim = scene.config.lang_dim
    embedder = embedder or StubTextEmbedder(dim=lang_dim, seed=capture.embed_seed)
    label_names = {0: BACKGROUND_TOKEN}
    for obj in objects:
        label_names[obj.id + 1] = obj.name
    token_vectors = np.stack([embedder.embed(label_names[i]) for i in sorted(label_names)])
    scene_avg = token_vectors.mean(axis=0)
    scene_avg /= np.linalg.norm(scene_avg)
    scale_blend = [0.0, 0.15, 0.3]

    cams = hemisphere_cameras(scene, capture)
    n_clusters = len(scene.clusters)
    onehot = np.zeros((scene.count, n_clusters + 1), dtype=np.float32)
    onehot[:, 0] = 1.0
    for row, c in enumerate(scene.clusters):
        onehot[c.indices, 0] = 0.0
        onehot[c.indices, row + 1] = 1.0

    embedding = _raw_embedding(capture.raw_dim, scene.config.feature_dim, capture.embed_seed)
    snap = scene.posed_snapshot(groups=onehot)
    raw_feats = (snap.features.astype(np.float64) @ embedding.T).astype(np.float32)
    snap_raw = scene.posed_snapshot(groups=onehot)
    snap_raw.features = raw_feats

    w, h = capture.image_size
    fs = capture.feature_stride
    ls = capture.language_stride
    frames_meta = []
    for i, cam in enumerate(cams):
        name = f"{i:03d}"
        out_full = render(snap, cam, ChannelMask(color=True, depth=True, group=True))
        write_png(out / "rgb" / f"{name}.png", out_full.color)

        depth = out_full.depth.astype(np.float64)
        if capture.depth_sigma > 0:
            idx = np.arange(h * w, dtype=np.uint64)
            noise = hash_normals(capture.embed_seed * 31 + i, idx, 1).reshape(h, w)
            depth = np.where(depth > 0, depth + capture.depth_sigma * noise, 0.0)
        write_f32(out / "depth" / f"{name}.f32", depth.astype(np.float32))

        weights = out_full.group  # (h, w, clusters+1) accumulated weights
        mask = np.where(
            out_full.alpha > 0.5, np.argmax(weights, axis=2), 0
        ).astype(np.uint8)
        write_png(out / "mask" / f"{name}.png", mask)

        rows = np.arange(fs // 2, h, fs)
        cols = np.arange(fs // 2, w, fs)
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        px = np.stack([rr.ravel(), cc.ravel()], axis=1)
        out_feat = render(
            snap_raw, cam, ChannelMask(color=False, depth=False, feature=True), pixels=px
        )
        fmap = out_feat.feature.reshape(len(rows), len(cols), capture.raw_dim).astype(np.float64)
        if capture.feature_sigma > 0:
            idx = px[:, 0] * w + px[:, 1]
            noise = hash_normals(capture.embed_seed * 131 + i, idx.astype(np.uint64), capture.raw_dim)
            fmap += capture.feature_sigma * noise.reshape(fmap.shape)
        write_f32(out / "feat" / f"{name}.f32", fmap.astype(np.float32))

        lrows = np.arange(ls // 2, h, ls)
        lcols = np.arange(ls // 2, w, ls)
        lmask = mask[np.ix_(lrows, lcols)]
        for k in range(len(scales)):
            beta = scale_blend[k]
            per_label = (1 - beta) * token_vectors + beta * scene_avg
            per_label /= np.linalg.norm(per_label, axis=1, keepdims=True)
            lmap = per_label[lmask]
            write_f32(out / "lang" / f"s{k}" / f"{name}.f32", lmap.astype(np.float32))

        m = np.eye(4)
        m[:3, :3] = cam.world_to_camera.rotation_matrix()
        m[:3, 3] = cam.world_to_camera.t
        frames_meta.append(
            {
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "width": cam.width, "height": cam.height,
                "world_to_camera": [[float(v) for v in row] for row in m],
            }
        )

    meta = {
        "frames": frames_meta,
        "language_scales": list(scales),
        "feature_stride": fs,
        "language_stride": ls,
        "label_names": {str(k): v for k, v in sorted(label_names.items())},
        "bounds_min": list(scene.config.bounds_min),
        "bounds_max": list(scene.config.bounds_max),
        "raw_dim": capture.raw_dim,
        "embed_seed": capture.embed_seed,
        "scene_seed": scene.config.seed,
    }
    (out / "cameras.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def standard_scene_spec(seed: int = 42) -> SceneSpec:
    """The regression-pinned scene: 3 objects (box, blob, bracket), seed 42."""
    return SceneSpec(seed=seed)


def standard_capture_spec() -> CaptureSpec:
    return CaptureSpec()
