"""Scene container: Gaussian primitives, object partition, persistence.

Primitives are stored structure-of-arrays (float32) for the pixel pipeline;
poses stay float64. Rendering always consumes a :class:`SceneSnapshot`,
an immutable copy with cluster delta poses applied, so pose updates never
race an in-flight render.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import BadMagic, ChecksumMismatch, UnknownCluster, VersionMismatch
from .geometry import PoseSE3, normalize_quat, quat_mul_batch, quat_to_matrix

MAGIC = b"POGS-SCENE\x00\x00\x00\x00\x00\x01"
BACKGROUND = -1


@dataclass
class SceneConfig:
    """Scene-wide dimensions and metadata, persisted in the file header."""

    feature_dim: int = 64
    group_dim: int = 16
    lang_dim: int = 64
    scene_unit: str = "meter"
    bounds_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bounds_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    @property
    def diagonal(self) -> float:
        lo = np.asarray(self.bounds_min, dtype=np.float64)
        hi = np.asarray(self.bounds_max, dtype=np.float64)
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic Gaussian; a value view into the scene arrays."""

    mean: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray
    feature: np.ndarray
    group_label: int = BACKGROUND

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    def cov3d(self) -> np.ndarray:
        R = quat_to_matrix(normalize_quat(self.rot))
        s2 = np.exp(2.0 * np.asarray(self.log_scale, dtype=np.float64))
        return R @ np.diag(s2) @ R.T


@dataclass
class ObjectCluster:
    """Index set plus the canonical frame fixed at scan time and the live pose."""

    id: int
    indices: np.ndarray
    canonical_frame: PoseSE3
    delta_pose: PoseSE3 = field(default_factory=PoseSE3.identity)

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)

    @property
    def size(self) -> int:
        return int(self.indices.size)

    def object_pose(self) -> PoseSE3:
        """Pose reported to users: delta applied on top of the canonical frame."""
        return self.delta_pose.compose(self.canonical_frame)


@dataclass
class SceneSnapshot:
    """Immutable posed copy of the scene consumed by the rasterizer.

    ``cluster_index`` maps each primitive to a row of ``cluster_ids`` /
    ``anchors`` (−1 = background). ``anchors`` are the posed cluster
    centroids; twist gradients from the rasterizer are taken about them.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    features: np.ndarray | None
    groups: np.ndarray | None
    cluster_index: np.ndarray
    cluster_ids: list[int]
    anchors: np.ndarray

    @property
    def count(self) -> int:
        return int(self.means.shape[0])


class GaussianScene:
    """Full primitive set plus object partition and per-object pose state."""

    def __init__(
        self,
        means: np.ndarray,
        rots: np.ndarray,
        log_scales: np.ndarray,
        opacity_logits: np.ndarray,
        colors: np.ndarray,
        features: np.ndarray,
        config: SceneConfig | None = None,
    ) -> None:
        n = means.shape[0]
        self.config = config or SceneConfig()
        self.means = np.ascontiguousarray(means, dtype=np.float32).reshape(n, 3)
        self.rots = np.ascontiguousarray(rots, dtype=np.float32).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float32).reshape(n, 3)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float32).reshape(n)
        self.colors = np.ascontiguousarray(colors, dtype=np.float32).reshape(n, 3)
        self.features = np.ascontiguousarray(features, dtype=np.float32).reshape(
            n, self.config.feature_dim
        )
        self.clusters: list[ObjectCluster] = []

    @property
    def count(self) -> int:
        return int(self.means.shape[0])

    @property
    def background(self) -> np.ndarray:
        taken = np.zeros(self.count, dtype=bool)
        for c in self.clusters:
            taken[c.indices] = True
        return np.nonzero(~taken)[0]

    def group_labels(self) -> np.ndarray:
        labels = np.full(self.count, BACKGROUND, dtype=np.int64)
        for c in self.clusters:
            labels[c.indices] = c.id
        return labels

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[i].astype(np.float64),
            rot=self.rots[i].astype(np.float64),
            log_scale=self.log_scales[i].astype(np.float64),
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i].astype(np.float64),
            feature=self.features[i].astype(np.float64),
            group_label=int(self.group_labels()[i]),
        )

    def cluster_by_id(self, cluster_id: int) -> ObjectCluster:
        for c in self.clusters:
            if c.id == cluster_id:
                return c
        raise UnknownCluster(f"no cluster with id {cluster_id}")

    def assign_clusters(self, labels: np.ndarray) -> None:
        """Partition primitives by label; label < 0 means background.

        Canonical frames are identity-rotation poses at the member centroid,
        delta poses reset to identity (scan-time state).
        """
        labels = np.asarray(labels, dtype=np.int64).reshape(self.count)
        self.clusters = []
        for cid in sorted(int(v) for v in np.unique(labels) if v >= 0):
            idx = np.nonzero(labels == cid)[0]
            centroid = self.means[idx].astype(np.float64).mean(axis=0)
            self.clusters.append(
                ObjectCluster(
                    id=cid,
                    indices=idx,
                    canonical_frame=PoseSE3(np.array([1.0, 0, 0, 0]), centroid),
                )
            )

    def set_cluster_pose(self, cluster_id: int, pose: PoseSE3) -> None:
        self.cluster_by_id(cluster_id).delta_pose = pose

    def validate(self) -> None:
        """Partition and quaternion invariants; raises AssertionError on breach."""
        seen = np.zeros(self.count, dtype=np.int64)
        for c in self.clusters:
            seen[c.indices] += 1
        assert seen.max(initial=0) <= 1, "cluster index sets overlap"
        norms = np.linalg.norm(self.rots.astype(np.float64), axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-5), "primitive quaternions drifted"
        for c in self.clusters:
            assert c.delta_pose is not None

    def posed_means(self) -> np.ndarray:
        """World-frame means with cluster delta poses applied (float64)."""
        out = self.means.astype(np.float64).copy()
        for c in self.clusters:
            out[c.indices] = c.delta_pose.apply(out[c.indices])
        return out

    def posed_snapshot(
        self,
        groups: np.ndarray | None = None,
        with_features: bool = True,
        dtype=np.float32,
    ) -> SceneSnapshot:
        """Immutable posed copy. ``dtype`` is float32 for the production pixel
        pipeline; test oracles may request float64."""
        means = self.means.astype(np.float64).copy()
        quats = self.rots.astype(np.float64).copy()
        cluster_index = np.full(self.count, -1, dtype=np.int32)
        cluster_ids: list[int] = []
        anchors = np.zeros((len(self.clusters), 3), dtype=np.float64)
        for row, c in enumerate(self.clusters):
            idx = c.indices
            means[idx] = c.delta_pose.apply(means[idx])
            quats[idx] = quat_mul_batch(c.delta_pose.q, quats[idx])
            cluster_index[idx] = row
            cluster_ids.append(c.id)
            anchors[row] = means[idx].mean(axis=0)
        qn = np.linalg.norm(quats, axis=1, keepdims=True)
        quats = quats / qn
        flip = quats[:, 0] < 0
        quats[flip] = -quats[flip]
        return SceneSnapshot(
            means=means.astype(dtype),
            quats=quats.astype(dtype),
            log_scales=self.log_scales.astype(dtype),
            opacity_logits=self.opacity_logits.astype(dtype),
            colors=self.colors.astype(dtype),
            features=self.features.astype(dtype) if with_features else None,
            groups=None if groups is None else np.ascontiguousarray(groups, dtype=dtype),
            cluster_index=cluster_index,
            cluster_ids=cluster_ids,
            anchors=anchors,
        )


def _pose_to_json(T: PoseSE3) -> dict:
    return {"q": [float(v) for v in T.q], "t": [float(v) for v in T.t]}


def _pose_from_json(d: dict) -> PoseSE3:
    return PoseSE3(np.array(d["q"], dtype=np.float64), np.array(d["t"], dtype=np.float64))


def save_scene(scene: GaussianScene, path) -> None:
    """Binary scene file: magic, length-prefixed JSON header, float32 arrays
    (mean/rot/log_scale/opacity_logit/color/feature), CRC32 trailer.
    Layout documented in docs/formats.md."""
    header = {
        "config": asdict(scene.config),
        "count": scene.count,
        "clusters": [
            {
                "id": c.id,
                "indices": [int(i) for i in c.indices],
                "canonical_frame": _pose_to_json(c.canonical_frame),
                "delta_pose": _pose_to_json(c.delta_pose),
            }
            for c in scene.clusters
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    for arr in (
        scene.means,
        scene.rots,
        scene.log_scales,
        scene.opacity_logits,
        scene.colors,
        scene.features,
    ):
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes(body))
        f.write(struct.pack("<I", crc))


def load_scene(path) -> GaussianScene:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC) - 1] != MAGIC[:-1]:
        raise BadMagic("not a scene file")
    if blob[len(MAGIC) - 1] != MAGIC[-1]:
        raise VersionMismatch(f"format version {blob[len(MAGIC) - 1]} unsupported")
    body = blob[len(MAGIC) : -4]
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch("scene file payload corrupt")
    (hlen,) = struct.unpack("<I", body[:4])
    header = json.loads(body[4 : 4 + hlen].decode("utf-8"))
    config = SceneConfig(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()
    })
    n = header["count"]
    offset = 4 + hlen
    arrays = []
    for dim in (3, 4, 3, 1, 3, config.feature_dim):
        nbytes = n * dim * 4
        arrays.append(
            np.frombuffer(body[offset : offset + nbytes], dtype="<f4").reshape(n, dim).copy()
        )
        offset += nbytes
    if offset != len(body):
        raise ChecksumMismatch("scene file has trailing bytes")
    scene = GaussianScene(
        means=arrays[0],
        rots=arrays[1],
        log_scales=arrays[2],
        opacity_logits=arrays[3][:, 0],
        colors=arrays[4],
        features=arrays[5],
        config=config,
    )
    for cj in header["clusters"]:
        scene.clusters.append(
            ObjectCluster(
                id=cj["id"],
                indices=np.array(cj["indices"], dtype=np.int64),
                canonical_frame=_pose_from_json(cj["canonical_frame"]),
                delta_pose=_pose_from_json(cj["delta_pose"]),
            )
        )
    return scene
