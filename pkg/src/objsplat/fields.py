"""Feature-field machinery: hash-grid encoders, grouping/language MLP fields,
PCA reduction of backbone features, and provider/text-embedder interfaces.

Both field types map positions (normalized to the scene AABB) through a
multiresolution hash encoding and a small ReLU MLP to an L2-normalized
embedding. Forward passes cache activations; ``*_backward`` returns exact
gradients for every table/MLP parameter and for the input positions
(trilinear interpolation is differentiable almost everywhere, and training
losses need the position path to stay consistent with finite differences).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveScale

_HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


@dataclass
class FieldConfig:
    """Hash-grid + MLP dimensions. Defaults follow the grouping-field
    literature; the standard pipeline shrinks table_size_log2 for CPU runs."""

    levels: int = 8
    features_per_level: int = 2
    table_size_log2: int = 19
    base_resolution: int = 16
    growth_factor: float = 1.5
    hidden_width: int = 64
    hidden_layers: int = 2
    out_dim: int = 16
    seed: int = 0

    @property
    def encoding_dim(self) -> int:
        return self.levels * self.features_per_level


class HashGridEncoder:
    """Multiresolution hash grid (XOR of per-axis primes, collisions tolerated)."""

    def __init__(self, config: FieldConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.table_size = 1 << config.table_size_log2
        self.resolutions = np.array(
            [
                int(np.floor(config.base_resolution * config.growth_factor**level))
                for level in range(config.levels)
            ],
            dtype=np.int64,
        )
        self.tables = rng.uniform(
            -1e-4, 1e-4, size=(config.levels, self.table_size, config.features_per_level)
        ).astype(np.float32)

    def _corner_indices(self, cell: np.ndarray) -> np.ndarray:
        """Hash integer grid coords (N,3) to table slots."""
        h = (
            cell[:, 0].astype(np.uint64) * _HASH_PRIMES[0]
            ^ cell[:, 1].astype(np.uint64) * _HASH_PRIMES[1]
            ^ cell[:, 2].astype(np.uint64) * _HASH_PRIMES[2]
        )
        return (h & np.uint64(self.table_size - 1)).astype(np.int64)

    def encode(self, x01: np.ndarray, cache: dict | None = None) -> np.ndarray:
        """x01 (N,3) in [0,1]^3 -> (N, levels*features_per_level)."""
        x01 = np.asarray(x01, dtype=np.float64).reshape(-1, 3)
        n = x01.shape[0]
        fpl = self.config.features_per_level
        out = np.empty((n, self.config.levels * fpl), dtype=np.float32)
        if cache is not None:
            cache["x01"] = x01
            cache["levels"] = []
        for level, res in enumerate(self.resolutions):
            pos = x01 * res
            base = np.minimum(np.floor(pos), res - 1).astype(np.int64)
            frac = pos - base
            level_cache = {"frac": frac, "corners": [], "weights": []}
            acc = np.zeros((n, fpl), dtype=np.float64)
            for corner in range(8):
                offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
                idx = self._corner_indices(base + offs)
                w = np.ones(n, dtype=np.float64)
                for ax in range(3):
                    w = w * (frac[:, ax] if offs[ax] else (1.0 - frac[:, ax]))
                acc += w[:, None] * self.tables[level][idx]
                if cache is not None:
                    level_cache["corners"].append(idx)
                    level_cache["weights"].append(w)
            out[:, level * fpl : (level + 1) * fpl] = acc.astype(np.float32)
            if cache is not None:
                cache["levels"].append(level_cache)
        return out

    def encode_backward(self, cache: dict, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (d_tables, d_x01)."""
        x01 = cache["x01"]
        n = x01.shape[0]
        fpl = self.config.features_per_level
        d_tables = np.zeros_like(self.tables)
        d_x01 = np.zeros((n, 3), dtype=np.float64)
        d_out = np.asarray(d_out, dtype=np.float64)
        for level, res in enumerate(self.resolutions):
            lc = cache["levels"][level]
            frac = lc["frac"]
            d_feat = d_out[:, level * fpl : (level + 1) * fpl]
            for corner in range(8):
                offs = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
                idx = lc["corners"][corner]
                w = lc["weights"][corner]
                np.add.at(d_tables[level], idx, (w[:, None] * d_feat).astype(np.float32))
                tv = self.tables[level][idx].astype(np.float64)
                g_w = np.sum(tv * d_feat, axis=1)
                for ax in range(3):
                    dw_dfrac = 1.0 if offs[ax] else -1.0
                    for other in range(3):
                        if other != ax:
                            dw_dfrac = dw_dfrac * (
                                frac[:, other] if offs[other] else (1.0 - frac[:, other])
                            )
                    d_x01[:, ax] += g_w * dw_dfrac * res
        return d_tables, d_x01


class Mlp:
    """Small fully-connected ReLU network with linear output layer."""

    def __init__(self, dims: list[int], rng: np.random.Generator) -> None:
        self.W: list[np.ndarray] = []
        self.b: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.W.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32))
            self.b.append(rng.uniform(-bound, bound, size=fan_out).astype(np.float32))

    def forward(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        h = np.asarray(x, dtype=np.float32)
        if cache is not None:
            cache["acts"] = [h]
        last = len(self.W) - 1
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
            if cache is not None:
                cache["acts"].append(h)
        return h

    def backward(self, cache: dict, d_out: np.ndarray) -> tuple[list, list, np.ndarray]:
        acts = cache["acts"]
        dW = [np.zeros_like(W) for W in self.W]
        db = [np.zeros_like(b) for b in self.b]
        g = np.asarray(d_out, dtype=np.float32)
        for i in range(len(self.W) - 1, -1, -1):
            if i < len(self.W) - 1:
                g = g * (acts[i + 1] > 0)
            dW[i] = acts[i].T @ g
            db[i] = g.sum(axis=0)
            g = g @ self.W[i].T
        return dW, db, g


def _l2_normalize(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    return u / norms, norms


def _l2_normalize_backward(y: np.ndarray, norms: np.ndarray, d_y: np.ndarray) -> np.ndarray:
    inner = np.sum(y * d_y, axis=1, keepdims=True)
    return (d_y - y * inner) / norms


class _FieldBase:
    """Shared plumbing: AABB normalization, parameter registry, backward."""

    def __init__(self, config: FieldConfig, bounds_min, bounds_max, extra_inputs: int = 0):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = HashGridEncoder(config, rng)
        dims = (
            [config.encoding_dim + extra_inputs]
            + [config.hidden_width] * config.hidden_layers
            + [config.out_dim]
        )
        self.mlp = Mlp(dims, rng)
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(bounds_max, dtype=np.float64)
        self.oob_clamp_count = 0

    def _normalize(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        span = self.bounds_max - self.bounds_min
        x01 = (x - self.bounds_min) / span
        oob = (x01 < 0.0) | (x01 > 1.0)
        if np.any(oob):
            self.oob_clamp_count += int(np.count_nonzero(np.any(oob, axis=1)))
            x01 = np.clip(x01, 0.0, 1.0)
        return x01, ~oob

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"tables": self.encoder.tables}
        for i, (W, b) in enumerate(zip(self.mlp.W, self.mlp.b)):
            params[f"W{i}"] = W
            params[f"b{i}"] = b
        return params

    def _forward(self, x: np.ndarray, extra: np.ndarray | None, cache: dict | None):
        x01, in_bounds = self._normalize(x)
        enc_cache: dict | None = {} if cache is not None else None
        enc = self.encoder.encode(x01, enc_cache)
        inp = enc if extra is None else np.concatenate([enc, extra.astype(np.float32)], axis=1)
        mlp_cache: dict | None = {} if cache is not None else None
        raw = self.mlp.forward(inp, mlp_cache)
        y, norms = _l2_normalize(raw.astype(np.float64))
        if cache is not None:
            cache.update(
                enc=enc_cache, mlp=mlp_cache, y=y, norms=norms,
                in_bounds=in_bounds, n_extra=0 if extra is None else extra.shape[1],
            )
        return y

    def _backward(self, cache: dict, d_y: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for parameters plus d_x (world frame) under key "x"."""
        d_raw = _l2_normalize_backward(cache["y"], cache["norms"], np.asarray(d_y, np.float64))
        dW, db, d_inp = self.mlp.backward(cache["mlp"], d_raw.astype(np.float32))
        n_extra = cache["n_extra"]
        enc_dim = self.config.encoding_dim
        d_enc = d_inp[:, :enc_dim]
        d_tables, d_x01 = self.encoder.encode_backward(cache["enc"], d_enc)
        span = self.bounds_max - self.bounds_min
        d_x = np.where(cache["in_bounds"], d_x01 / span, 0.0)
        grads: dict[str, np.ndarray] = {"tables": d_tables, "x": d_x}
        if n_extra:
            grads["extra"] = d_inp[:, enc_dim:].astype(np.float64)
        for i in range(len(dW)):
            grads[f"W{i}"] = dW[i]
            grads[f"b{i}"] = db[i]
        return grads


class GroupEmbedder(_FieldBase):
    """Position -> unit-norm grouping embedding (the clustering feature field)."""

    def __init__(self, bounds_min, bounds_max, config: FieldConfig | None = None) -> None:
        super().__init__(config or FieldConfig(), bounds_min, bounds_max)

    def embed(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        return self._forward(x, None, cache)

    def embed_backward(self, cache: dict, d_y: np.ndarray) -> dict[str, np.ndarray]:
        return self._backward(cache, d_y)


class LanguageField(_FieldBase):
    """(position, physical scale) -> unit-norm language-aligned embedding."""

    def __init__(self, bounds_min, bounds_max, config: FieldConfig | None = None) -> None:
        cfg = config or FieldConfig(out_dim=64, seed=1)
        super().__init__(cfg, bounds_min, bounds_max, extra_inputs=1)

    def embed(self, x: np.ndarray, scale, cache: dict | None = None) -> np.ndarray:
        scale = np.asarray(scale, dtype=np.float64)
        if np.any(scale <= 0.0):
            raise NonPositiveScale("language field scale must be > 0")
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        scale = np.broadcast_to(scale.reshape(-1), (x.shape[0],)).reshape(-1, 1)
        return self._forward(x, scale, cache)

    def embed_backward(self, cache: dict, d_y: np.ndarray) -> dict[str, np.ndarray]:
        return self._backward(cache, d_y)


@dataclass
class PcaReducer:
    """Orthonormal projection onto the top principal components."""

    mean: np.ndarray
    basis: np.ndarray  # (raw_dim, out_dim), orthonormal columns
    explained_variance: np.ndarray
    rank_deficient: bool = False

    @property
    def out_dim(self) -> int:
        return self.basis.shape[1]

    def project(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return (v - self.mean) @ self.basis


def pca_fit(samples: np.ndarray, out_dim: int = 64) -> PcaReducer:
    """Top-``out_dim`` principal directions of the samples, descending
    eigenvalue order, sign-canonicalized (largest-magnitude entry positive).

    Rank-deficient sample sets are padded with an arbitrary orthonormal
    completion and flagged.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n, raw_dim = samples.shape
    if n < out_dim:
        raise ValueError(f"need at least {out_dim} samples, got {n}")
    if raw_dim < out_dim:
        raise ValueError(f"raw dimension {raw_dim} below output dimension {out_dim}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=raw_dim <= n)
    if vt.shape[0] < out_dim:
        # fewer singular vectors than requested: complete the basis
        completion = np.linalg.qr(np.random.default_rng(0).normal(size=(raw_dim, raw_dim)))[0]
        vt = np.vstack([vt, completion.T])[:raw_dim]
    basis = vt[:out_dim].T.copy()
    var = np.zeros(out_dim)
    var[: min(out_dim, s.size)] = (s[:out_dim] ** 2) / max(n - 1, 1)
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size else 0
    flip = np.abs(basis).argmax(axis=0)
    signs = np.sign(basis[flip, np.arange(out_dim)])
    signs[signs == 0] = 1.0
    basis *= signs
    return PcaReducer(
        mean=mean,
        basis=basis,
        explained_variance=var,
        rank_deficient=rank < out_dim,
    )


def pca_project(reducer: PcaReducer, v: np.ndarray) -> np.ndarray:
    return reducer.project(v)


class FeatureProvider:
    """Source of raw backbone-style feature maps for observation frames."""

    raw_dim: int

    def features(self, frame_id: int, cam) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


class FileProvider(FeatureProvider):
    """Loads precomputed ``.f32`` feature maps (e.g. exported offline)."""

    def __init__(self, paths: list) -> None:
        from .formats import read_f32

        self._read = read_f32
        self.paths = list(paths)
        first = self._read(self.paths[0])
        self.raw_dim = first.shape[2]
        self._shape = first.shape

    def features(self, frame_id: int, cam=None) -> np.ndarray:
        arr = self._read(self.paths[frame_id])
        if arr.shape != self._shape:
            raise ValueError(f"feature map {frame_id} shape {arr.shape} != {self._shape}")
        return arr


def _unit_vector_from_token(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


class TextEmbedder:
    """Maps query strings to unit vectors; identical strings map identically."""

    dim: int

    def embed(self, text: str) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


class StubTextEmbedder(TextEmbedder):
    """Deterministic stand-in for a real text encoder.

    Each token hashes to a fixed unit vector; an assignment table lets
    dataset labels and user queries share a vector (e.g. "red box" -> the
    vector of label "object_0").
    """

    def __init__(self, dim: int = 64, seed: int = 0, assignments: dict[str, str] | None = None):
        self.dim = dim
        self.seed = seed
        self.assignments = dict(assignments or {})

    def assign(self, query: str, token: str) -> None:
        self.assignments[query] = token

    def embed(self, text: str) -> np.ndarray:
        token = self.assignments.get(text, text)
        return _unit_vector_from_token(token, self.dim, self.seed)


class FileTextEmbedder(TextEmbedder):
    """Query -> vector map loaded from JSON ({"dim": L, "entries": {...}})."""

    def __init__(self, path) -> None:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        self.dim = int(payload["dim"])
        self.entries = {}
        for key, vec in payload["entries"].items():
            v = np.asarray(vec, dtype=np.float64)
            if v.shape != (self.dim,):
                raise ValueError(f"entry {key!r} has dimension {v.shape}, expected ({self.dim},)")
            self.entries[key] = v / np.linalg.norm(v)

    def embed(self, text: str) -> np.ndarray:
        if text not in self.entries:
            raise KeyError(f"no embedding stored for query {text!r}")
        return self.entries[text]
