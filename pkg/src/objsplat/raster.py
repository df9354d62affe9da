"""Differentiable multi-channel tile rasterizer for Gaussian scenes.

Front-to-back alpha compositing: per pixel, C = Σ_i c_i α_i T_i with
T_i = Π_{j<i} (1 − α_j) and α_i = opacity_i · exp(−½ Δᵀ Σ2d⁻¹ Δ), Gaussians
sorted by camera-frame depth. Depth is alpha-weighted expected depth
normalized by accumulated alpha; feature and grouping channels composite
with the same weights as color.

Two rules are part of the compositing *math*, shared by the tiled renderer
and the untiled reference so the two stay equivalent to float precision:

* contributions with α < ALPHA_SKIP are dropped (and the tile culling
  radius is derived from ALPHA_SKIP, so culling never removes a pixel
  contribution the reference would keep);
* weights are zero once the incoming transmittance falls below
  STOP_TRANSMITTANCE (the tiled path exploits this to terminate early; the
  reference applies it as a mask).

The pixel pipeline is float32; per-Gaussian projection/setup and gradient
accumulators run in float64. ``render_backward`` returns exact reverse-mode
gradients of this forward map, including per-cluster twist gradients
(omega, v, taken about the snapshot's cluster anchors).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, quats_to_matrices
from .scene import SceneSnapshot

ALPHA_SKIP = 1.0 / 255.0
MAX_ALPHA = 0.99
STOP_TRANSMITTANCE = 1e-4
COV2D_BLUR = 0.3
DEPTH_ALPHA_MIN = 0.2
TILE = 16
Z_NEAR = 1e-4
_CHUNK = 768


@dataclass(frozen=True)
class ChannelMask:
    """Which optional channels to composite; alpha is always produced."""

    color: bool = True
    depth: bool = True
    feature: bool = False
    group: bool = False


@dataclass
class RenderOutput:
    """Rendered channels. Full-image arrays are (H,W,...); when the render
    was restricted to a pixel list, arrays are (P,...) and ``pixels`` holds
    the (row, col) coordinates. Disabled channels are None."""

    alpha: np.ndarray
    color: np.ndarray | None = None
    depth: np.ndarray | None = None
    feature: np.ndarray | None = None
    group: np.ndarray | None = None
    pixels: np.ndarray | None = None


@dataclass
class OutputGrads:
    """Upstream image-space gradients; None means zero."""

    color: np.ndarray | None = None
    depth: np.ndarray | None = None
    alpha: np.ndarray | None = None
    feature: np.ndarray | None = None
    group: np.ndarray | None = None


@dataclass
class RenderGrads:
    """Gradients w.r.t. snapshot parameters and per-cluster pose twists."""

    d_means: np.ndarray
    d_quats: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_colors: np.ndarray
    d_features: np.ndarray | None
    d_groups: np.ndarray | None
    d_cluster_twists: np.ndarray  # (C, 6): omega about anchor, then v


class _Prep:
    """Per-visible-Gaussian projection products shared by forward/backward."""

    __slots__ = (
        "idx",
        "uv",
        "conic",
        "cov2d",
        "z",
        "opacity",
        "radius",
        "t_cam",
        "cov_cam",
        "J",
        "R",
        "cov3d",
        "clamped_x",
        "clamped_y",
        "txc",
        "tyc",
    )


def _prepare(snapshot: SceneSnapshot, cam: CameraModel) -> _Prep | None:
    n = snapshot.count
    if n == 0:
        return None
    W = cam.world_to_camera.rotation_matrix()
    means = snapshot.means.astype(np.float64)
    t_cam = means @ W.T + cam.world_to_camera.t
    z = t_cam[:, 2]
    opacity = 1.0 / (1.0 + np.exp(-snapshot.opacity_logits.astype(np.float64)))
    front = (z > Z_NEAR) & (opacity > ALPHA_SKIP)
    idx = np.nonzero(front)[0]
    if idx.size == 0:
        return None
    t_cam = t_cam[idx]
    z = z[idx]
    opacity = opacity[idx]

    R = quats_to_matrices(snapshot.quats[idx].astype(np.float64))
    s = np.exp(snapshot.log_scales[idx].astype(np.float64))
    M = R * s[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)
    cov_cam = np.einsum("ij,njk,lk->nil", W, cov3d, W)

    tz = t_cam[:, 2]
    lim_x = 1.3 * (0.5 * cam.width / cam.fx)
    lim_y = 1.3 * (0.5 * cam.height / cam.fy)
    rx = t_cam[:, 0] / tz
    ry = t_cam[:, 1] / tz
    clamped_x = np.abs(rx) > lim_x
    clamped_y = np.abs(ry) > lim_y
    txc = tz * np.clip(rx, -lim_x, lim_x)
    tyc = tz * np.clip(ry, -lim_y, lim_y)
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * txc / (tz * tz)
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * tyc / (tz * tz)
    cov2d = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cov2d[:, 0, 0] += COV2D_BLUR
    cov2d[:, 1, 1] += COV2D_BLUR

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.sqrt(2.0 * np.log(opacity / ALPHA_SKIP) * lam_max)

    uv = np.stack(
        [cam.fx * rx + cam.cx, cam.fy * ry + cam.cy],
        axis=1,
    )

    order = np.argsort(z, kind="stable")
    p = _Prep()
    p.idx = idx[order]
    p.uv = uv[order]
    p.conic = conic[order]
    p.cov2d = cov2d[order]
    p.z = z[order]
    p.opacity = opacity[order]
    p.radius = radius[order]
    p.t_cam = t_cam[order]
    p.cov_cam = cov_cam[order]
    p.J = J[order]
    p.R = R[order]
    p.cov3d = cov3d[order]
    p.clamped_x = clamped_x[order]
    p.clamped_y = clamped_y[order]
    p.txc = txc[order]
    p.tyc = tyc[order]
    return p


def _bin_tiles(p: _Prep, cam: CameraModel) -> tuple[np.ndarray, np.ndarray, int, int]:
    """CSR tile lists of Gaussian ranks (depth-ordered within each tile)."""
    tiles_x = (cam.width + TILE - 1) // TILE
    tiles_y = (cam.height + TILE - 1) // TILE
    x0 = np.clip(np.floor((p.uv[:, 0] - p.radius) / TILE).astype(np.int64), 0, tiles_x - 1)
    x1 = np.clip(np.floor((p.uv[:, 0] + p.radius) / TILE).astype(np.int64), 0, tiles_x - 1)
    y0 = np.clip(np.floor((p.uv[:, 1] - p.radius) / TILE).astype(np.int64), 0, tiles_y - 1)
    y1 = np.clip(np.floor((p.uv[:, 1] + p.radius) / TILE).astype(np.int64), 0, tiles_y - 1)
    inside = (
        (p.uv[:, 0] + p.radius >= 0)
        & (p.uv[:, 0] - p.radius < cam.width)
        & (p.uv[:, 1] + p.radius >= 0)
        & (p.uv[:, 1] - p.radius < cam.height)
    )
    nx = np.where(inside, x1 - x0 + 1, 0)
    ny = np.where(inside, y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    tile_ids = np.empty(total, dtype=np.int64)
    ranks = np.empty(total, dtype=np.int64)
    pos = 0
    for rank in np.nonzero(counts)[0]:
        tx = np.arange(x0[rank], x1[rank] + 1)
        ty = np.arange(y0[rank], y1[rank] + 1)
        ids = (ty[:, None] * tiles_x + tx[None, :]).ravel()
        tile_ids[pos : pos + ids.size] = ids
        ranks[pos : pos + ids.size] = rank
        pos += ids.size
    order = np.argsort(tile_ids, kind="stable")  # stable keeps depth order per tile
    tile_ids = tile_ids[order]
    ranks = ranks[order]
    starts = np.searchsorted(tile_ids, np.arange(tiles_x * tiles_y + 1))
    return ranks, starts, tiles_x, tiles_y


def _tile_pixels(cam: CameraModel, pixels: np.ndarray | None, tiles_x: int, tiles_y: int):
    """Yield (tile_id, rows, cols, out_idx) per non-empty tile; out_idx indexes
    the flat output array (row-major for full frames, list position otherwise)."""
    if pixels is None:
        for ty in range(tiles_y):
            rows = np.arange(ty * TILE, min((ty + 1) * TILE, cam.height))
            for tx in range(tiles_x):
                cols = np.arange(tx * TILE, min((tx + 1) * TILE, cam.width))
                rr, cc = np.meshgrid(rows, cols, indexing="ij")
                rr = rr.ravel()
                cc = cc.ravel()
                yield ty * tiles_x + tx, rr, cc, rr * cam.width + cc
    else:
        tid = (pixels[:, 0] // TILE) * tiles_x + (pixels[:, 1] // TILE)
        order = np.argsort(tid, kind="stable")
        tid_sorted = tid[order]
        boundaries = np.nonzero(np.diff(tid_sorted))[0] + 1
        for chunk in np.split(order, boundaries):
            yield int(tid[chunk[0]]), pixels[chunk, 0], pixels[chunk, 1], chunk


def _channel_matrix(
    snapshot: SceneSnapshot, p: _Prep, layout: list[tuple[str, int]]
) -> np.ndarray:
    """Stack [1 | z | color | feature | group] columns for the composite matmul."""
    dt = snapshot.means.dtype
    cols: list[np.ndarray] = []
    for name, _ in layout:
        if name == "alpha":
            cols.append(np.ones((p.idx.size, 1), dtype=dt))
        elif name == "zdepth":
            cols.append(p.z.astype(dt)[:, None])
        elif name == "color":
            cols.append(snapshot.colors[p.idx])
        elif name == "feature":
            cols.append(snapshot.features[p.idx])
        elif name == "group":
            cols.append(snapshot.groups[p.idx])
    return np.concatenate(cols, axis=1)


def _composite_tile(
    uv: np.ndarray,
    conic: np.ndarray,
    opacity: np.ndarray,
    V: np.ndarray,
    px: np.ndarray,
    py: np.ndarray,
) -> np.ndarray:
    """Forward compositing of one tile: returns (P, C) accumulated channels."""
    dt = V.dtype
    P = px.shape[0]
    out = np.zeros((P, V.shape[1]), dtype=dt)
    T = np.ones(P, dtype=dt)
    K = uv.shape[0]
    for s in range(0, K, _CHUNK):
        e = min(s + _CHUNK, K)
        dx = px[:, None] - uv[None, s:e, 0]
        dy = py[:, None] - uv[None, s:e, 1]
        power = -0.5 * (
            conic[None, s:e, 0] * dx * dx
            + 2.0 * conic[None, s:e, 1] * dx * dy
            + conic[None, s:e, 2] * dy * dy
        )
        alpha = opacity[None, s:e] * np.exp(power)
        np.minimum(alpha, MAX_ALPHA, out=alpha)
        alpha[alpha < ALPHA_SKIP] = 0.0
        keep = np.cumprod(1.0 - alpha, axis=1)
        Tin = np.empty_like(keep)
        Tin[:, 0] = T
        Tin[:, 1:] = T[:, None] * keep[:, :-1]
        w = alpha * Tin
        w[Tin < STOP_TRANSMITTANCE] = 0.0
        out += w @ V[s:e]
        T = T * keep[:, -1]
        if np.all(T < STOP_TRANSMITTANCE):
            break
    return out


def _split_channels(raw: np.ndarray, layout: list[tuple[str, int]]) -> dict[str, np.ndarray]:
    parts: dict[str, np.ndarray] = {}
    at = 0
    for name, width in layout:
        parts[name] = raw[..., at : at + width]
        at += width
    return parts


def _layout_for(snapshot: SceneSnapshot, channels: ChannelMask) -> list[tuple[str, int]]:
    layout = [("alpha", 1), ("zdepth", 1)]
    if channels.color:
        layout.append(("color", 3))
    if channels.feature:
        if snapshot.features is None:
            raise ValueError("feature channel requested but snapshot has no features")
        layout.append(("feature", snapshot.features.shape[1]))
    if channels.group:
        if snapshot.groups is None:
            raise ValueError("group channel requested but snapshot has no groups")
        layout.append(("group", snapshot.groups.shape[1]))
    return layout


def _assemble_output(
    raw: np.ndarray,
    layout: list[tuple[str, int]],
    channels: ChannelMask,
    total_shape: tuple[int, ...],
    pixels: np.ndarray | None,
) -> RenderOutput:
    parts = _split_channels(raw, layout)
    alpha = parts["alpha"][..., 0]
    out = RenderOutput(alpha=alpha.reshape(total_shape), pixels=pixels)
    if channels.depth:
        znum = parts["zdepth"][..., 0]
        depth = np.where(alpha >= DEPTH_ALPHA_MIN, znum / np.maximum(alpha, 1e-12), 0.0)
        out.depth = depth.reshape(total_shape).astype(raw.dtype)
    if channels.color:
        out.color = parts["color"].reshape(total_shape + (3,))
    if channels.feature:
        out.feature = parts["feature"].reshape(total_shape + (parts["feature"].shape[-1],))
    if channels.group:
        out.group = parts["group"].reshape(total_shape + (parts["group"].shape[-1],))
    return out


def render(
    snapshot: SceneSnapshot,
    cam: CameraModel,
    channels: ChannelMask = ChannelMask(),
    pixels: np.ndarray | None = None,
) -> RenderOutput:
    """Rasterize the snapshot. ``pixels`` restricts output to (row, col) pairs."""
    if pixels is not None:
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        total_shape: tuple[int, ...] = (pixels.shape[0],)
        n_out = pixels.shape[0]
    else:
        total_shape = (cam.height, cam.width)
        n_out = cam.height * cam.width

    dt = snapshot.means.dtype
    layout = _layout_for(snapshot, channels)
    width_total = sum(w for _, w in layout)
    raw = np.zeros((n_out, width_total), dtype=dt)

    p = _prepare(snapshot, cam)
    if p is not None:
        V = _channel_matrix(snapshot, p, layout).astype(dt)
        uv = p.uv.astype(dt)
        conic = p.conic.astype(dt)
        opacity = p.opacity.astype(dt)
        ranks, starts, tiles_x, tiles_y = _bin_tiles(p, cam)
        for tile_id, rows, cols, out_idx in _tile_pixels(cam, pixels, tiles_x, tiles_y):
            rs = ranks[starts[tile_id] : starts[tile_id + 1]]
            if rs.size == 0:
                continue
            px = cols.astype(dt) + dt.type(0.5)
            py = rows.astype(dt) + dt.type(0.5)
            raw[out_idx] = _composite_tile(uv[rs], conic[rs], opacity[rs], V[rs], px, py)
    return _assemble_output(raw, layout, channels, total_shape, pixels)


def render_pixels_reference(
    snapshot: SceneSnapshot,
    cam: CameraModel,
    pixels: np.ndarray,
    channels: ChannelMask = ChannelMask(),
) -> RenderOutput:
    """Untiled O(N·P) reference: every visible Gaussian against every listed
    pixel, float64 accumulation, no culling and no early loop exit. Shares the
    compositing math (ALPHA_SKIP / STOP_TRANSMITTANCE masks) with render()."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    n_px = pixels.shape[0]
    layout = _layout_for(snapshot, channels)
    width_total = sum(w for _, w in layout)
    raw = np.zeros((n_px, width_total), dtype=np.float64)
    p = _prepare(snapshot, cam)
    if p is not None and n_px > 0:
        V = _channel_matrix(snapshot, p, layout).astype(np.float64)
        uv = p.uv
        conic = p.conic
        opacity = p.opacity
        for s in range(0, n_px, 512):
            e = min(s + 512, n_px)
            px = pixels[s:e, 1].astype(np.float64) + 0.5
            py = pixels[s:e, 0].astype(np.float64) + 0.5
            dx = px[:, None] - uv[None, :, 0]
            dy = py[:, None] - uv[None, :, 1]
            power = -0.5 * (
                conic[None, :, 0] * dx * dx
                + 2.0 * conic[None, :, 1] * dx * dy
                + conic[None, :, 2] * dy * dy
            )
            alpha = opacity[None, :] * np.exp(power)
            np.minimum(alpha, MAX_ALPHA, out=alpha)
            alpha[alpha < ALPHA_SKIP] = 0.0
            keep = np.cumprod(1.0 - alpha, axis=1)
            Tin = np.empty_like(keep)
            Tin[:, 0] = 1.0
            Tin[:, 1:] = keep[:, :-1]
            w = alpha * Tin
            w[Tin < STOP_TRANSMITTANCE] = 0.0
            raw[s:e] = w @ V
    out = _assemble_output(
        raw.astype(np.float64), layout, channels, (n_px,), pixels
    )
    return out


def _depth_chain(
    out: RenderOutput, grads: OutputGrads, n_px: int, width: int
) -> np.ndarray | None:
    """Build the per-pixel gradient matrix on the extended channel layout."""
    d_raw = np.zeros((n_px, width), dtype=np.float64)
    any_grad = False
    if grads.alpha is not None:
        d_raw[:, 0] += np.asarray(grads.alpha, dtype=np.float64).reshape(n_px)
        any_grad = True
    if grads.depth is not None:
        if out.depth is None:
            raise ValueError("depth gradient supplied but depth was not rendered")
        d_depth = np.asarray(grads.depth, dtype=np.float64).reshape(n_px)
        alpha = out.alpha.reshape(n_px).astype(np.float64)
        depth = out.depth.reshape(n_px).astype(np.float64)
        live = alpha >= DEPTH_ALPHA_MIN
        scale = np.where(live, 1.0 / np.maximum(alpha, 1e-12), 0.0)
        d_raw[:, 1] += d_depth * scale
        d_raw[:, 0] += -d_depth * depth * scale
        any_grad = True
    col = 2
    for name, arr in (("color", grads.color), ("feature", grads.feature), ("group", grads.group)):
        rendered = getattr(out, name)
        if rendered is not None:
            wdt = rendered.shape[-1]
            if arr is not None:
                d_raw[:, col : col + wdt] = np.asarray(arr, dtype=np.float64).reshape(n_px, wdt)
                any_grad = True
            col += wdt
    return d_raw if any_grad else None


def render_backward(
    snapshot: SceneSnapshot,
    cam: CameraModel,
    out: RenderOutput,
    grads: OutputGrads,
    param_grads: bool = True,
) -> RenderGrads:
    """Exact reverse-mode gradients of render() for the given upstream grads.

    ``out`` must be the RenderOutput produced by render() on the same
    snapshot/camera/pixels. Twist gradients are about snapshot.anchors, in
    (omega, v) order, and include both the mean motion and the rigid rotation
    of member covariances.
    """
    channels = ChannelMask(
        color=out.color is not None,
        depth=out.depth is not None,
        feature=out.feature is not None,
        group=out.group is not None,
    )
    n = snapshot.count
    n_clusters = len(snapshot.cluster_ids)
    feat_dim = snapshot.features.shape[1] if snapshot.features is not None else 0
    group_dim = snapshot.groups.shape[1] if snapshot.groups is not None else 0
    zero = RenderGrads(
        d_means=np.zeros((n, 3)),
        d_quats=np.zeros((n, 4)),
        d_log_scales=np.zeros((n, 3)),
        d_opacity_logits=np.zeros(n),
        d_colors=np.zeros((n, 3)),
        d_features=np.zeros((n, feat_dim)) if channels.feature else None,
        d_groups=np.zeros((n, group_dim)) if channels.group else None,
        d_cluster_twists=np.zeros((n_clusters, 6)),
    )
    p = _prepare(snapshot, cam)
    if p is None:
        return zero
    pixels = out.pixels
    n_px = out.alpha.size
    layout = _layout_for(snapshot, channels)
    width_total = sum(w for _, w in layout)
    d_raw = _depth_chain(out, grads, n_px, width_total)
    if d_raw is None:
        return zero

    dt = snapshot.means.dtype
    V = _channel_matrix(snapshot, p, layout).astype(dt)
    uv = p.uv.astype(dt)
    conic = p.conic.astype(dt)
    opacity = p.opacity.astype(dt)
    ranks, starts, tiles_x, tiles_y = _bin_tiles(p, cam)
    m = p.idx.size
    acc_uv = np.zeros((m, 2))
    acc_conic = np.zeros((m, 3))
    acc_opacity = np.zeros(m)
    acc_V = np.zeros((m, width_total))

    for tile_id, rows, cols, out_idx in _tile_pixels(cam, pixels, tiles_x, tiles_y):
        rs = ranks[starts[tile_id] : starts[tile_id + 1]]
        if rs.size == 0:
            continue
        d_tile = d_raw[out_idx].astype(dt)
        if not np.any(d_tile):
            continue
        px = cols.astype(dt) + dt.type(0.5)
        py = rows.astype(dt) + dt.type(0.5)
        _backward_tile(
            uv[rs], conic[rs], opacity[rs], V[rs], px, py, d_tile,
            rs, acc_uv, acc_conic, acc_opacity, acc_V,
        )

    return _geometry_chain(
        snapshot, cam, p, channels, layout,
        acc_uv, acc_conic, acc_opacity, acc_V, zero, param_grads,
    )


def _backward_tile(uv, conic, opacity, V, px, py, d_tile, rs, acc_uv, acc_conic, acc_opacity, acc_V):
    """Reverse-mode compositing for one tile; accumulates into per-rank arrays."""
    K = uv.shape[0]
    P = px.shape[0]
    n_chunks = (K + _CHUNK - 1) // _CHUNK
    # First pass: per-chunk entry transmittance and sum of w*g_w (for suffix sums).
    T = np.ones(P, dtype=V.dtype)
    carries = []
    chunk_wg_sums = np.zeros((n_chunks, P), dtype=np.float64)
    live_chunks = 0
    for ci in range(n_chunks):
        s = ci * _CHUNK
        e = min(s + _CHUNK, K)
        carries.append(T.copy())
        live_chunks = ci + 1
        dx = px[:, None] - uv[None, s:e, 0]
        dy = py[:, None] - uv[None, s:e, 1]
        power = -0.5 * (
            conic[None, s:e, 0] * dx * dx
            + 2.0 * conic[None, s:e, 1] * dx * dy
            + conic[None, s:e, 2] * dy * dy
        )
        alpha = opacity[None, s:e] * np.exp(power)
        np.minimum(alpha, MAX_ALPHA, out=alpha)
        alpha[alpha < ALPHA_SKIP] = 0.0
        keep = np.cumprod(1.0 - alpha, axis=1)
        Tin = np.empty_like(keep)
        Tin[:, 0] = T
        Tin[:, 1:] = T[:, None] * keep[:, :-1]
        w = alpha * Tin
        w[Tin < STOP_TRANSMITTANCE] = 0.0
        g_w = d_tile @ V[s:e].T
        chunk_wg_sums[ci] = (w * g_w).sum(axis=1, dtype=np.float64)
        T = T * keep[:, -1]
        if np.all(T < STOP_TRANSMITTANCE):
            break
    # Suffix totals: wg mass in all chunks strictly after chunk ci.
    after = np.zeros((live_chunks, P), dtype=np.float64)
    running = np.zeros(P, dtype=np.float64)
    for ci in range(live_chunks - 1, -1, -1):
        after[ci] = running
        running += chunk_wg_sums[ci]
    # Second pass: per-element alpha gradients and parameter accumulation.
    for ci in range(live_chunks):
        s = ci * _CHUNK
        e = min(s + _CHUNK, K)
        T = carries[ci]
        dx = px[:, None] - uv[None, s:e, 0]
        dy = py[:, None] - uv[None, s:e, 1]
        power = -0.5 * (
            conic[None, s:e, 0] * dx * dx
            + 2.0 * conic[None, s:e, 1] * dx * dy
            + conic[None, s:e, 2] * dy * dy
        )
        alpha_raw = opacity[None, s:e] * np.exp(power)
        capped = alpha_raw > MAX_ALPHA
        alpha = np.minimum(alpha_raw, MAX_ALPHA)
        skipped = alpha < ALPHA_SKIP
        alpha[skipped] = 0.0
        keep = np.cumprod(1.0 - alpha, axis=1)
        Tin = np.empty_like(keep)
        Tin[:, 0] = T
        Tin[:, 1:] = T[:, None] * keep[:, :-1]
        dead = Tin < STOP_TRANSMITTANCE
        w = alpha * Tin
        w[dead] = 0.0
        g_w = (d_tile @ V[s:e].T).astype(np.float64)
        wg = w * g_w
        # suffix sum of wg within chunk (exclusive) plus mass of later chunks
        suffix = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1]
        S = np.empty_like(suffix)
        S[:, :-1] = suffix[:, 1:]
        S[:, -1] = 0.0
        S += after[ci][:, None]
        d_alpha = Tin * g_w - S / (1.0 - alpha)
        d_alpha[skipped | dead] = 0.0
        d_power = d_alpha * alpha
        d_power[capped] = 0.0
        d_op_px = d_alpha * np.exp(power)
        d_op_px[capped | skipped | dead] = 0.0

        a = conic[None, s:e, 0]
        b = conic[None, s:e, 1]
        c = conic[None, s:e, 2]
        sl = slice(s, e)
        idx = rs[sl]
        np.add.at(acc_uv[:, 0], idx, ((a * dx + b * dy) * d_power).sum(axis=0))
        np.add.at(acc_uv[:, 1], idx, ((b * dx + c * dy) * d_power).sum(axis=0))
        np.add.at(acc_conic[:, 0], idx, (-0.5 * dx * dx * d_power).sum(axis=0))
        np.add.at(acc_conic[:, 1], idx, (-dx * dy * d_power).sum(axis=0))
        np.add.at(acc_conic[:, 2], idx, (-0.5 * dy * dy * d_power).sum(axis=0))
        np.add.at(acc_opacity, idx, d_op_px.sum(axis=0))
        np.add.at(acc_V, idx, w.T @ d_tile)


def _quat_grad_from_rotation_grad(dR: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Chain a (N,3,3) rotation-matrix gradient to quaternion entries."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zeros = np.zeros_like(w)
    dRdw = 2.0 * np.stack(
        [zeros, -z, y, z, zeros, -x, -y, x, zeros], axis=1
    ).reshape(-1, 3, 3)
    dRdx = 2.0 * np.stack(
        [zeros, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1
    ).reshape(-1, 3, 3)
    dRdy = 2.0 * np.stack(
        [-2 * y, x, w, x, zeros, z, -w, z, -2 * y], axis=1
    ).reshape(-1, 3, 3)
    dRdz = 2.0 * np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zeros], axis=1
    ).reshape(-1, 3, 3)
    return np.stack(
        [
            (dR * dRdw).sum(axis=(1, 2)),
            (dR * dRdx).sum(axis=(1, 2)),
            (dR * dRdy).sum(axis=(1, 2)),
            (dR * dRdz).sum(axis=(1, 2)),
        ],
        axis=1,
    )


def _geometry_chain(
    snapshot, cam, p, channels, layout, acc_uv, acc_conic, acc_opacity, acc_V, result, param_grads
):
    """Chain pixel-space gradients through projection to 3D parameters/twists."""
    W = cam.world_to_camera.rotation_matrix()
    m = p.idx.size

    conic_mat = np.empty((m, 2, 2))
    conic_mat[:, 0, 0] = p.conic[:, 0]
    conic_mat[:, 0, 1] = conic_mat[:, 1, 0] = p.conic[:, 1]
    conic_mat[:, 1, 1] = p.conic[:, 2]
    G_c = np.empty((m, 2, 2))
    G_c[:, 0, 0] = acc_conic[:, 0]
    G_c[:, 0, 1] = G_c[:, 1, 0] = 0.5 * acc_conic[:, 1]
    G_c[:, 1, 1] = acc_conic[:, 2]
    d_cov2d = -np.einsum("nij,njk,nkl->nil", conic_mat, G_c, conic_mat)

    d_cov_cam = np.einsum("nji,njk,nkl->nil", p.J, d_cov2d, p.J)
    d_J = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov2d, p.J, p.cov_cam)
    d_cov3d = np.einsum("ji,njk,kl->nil", W, d_cov_cam, W)

    tz = p.t_cam[:, 2]
    tx = p.t_cam[:, 0]
    ty = p.t_cam[:, 1]
    fx, fy = cam.fx, cam.fy
    d_t = np.zeros((m, 3))
    # Jacobian entries J00=fx/tz, J02=-fx*txc/tz^2, J11=fy/tz, J12=-fy*tyc/tz^2
    d_t[:, 2] += d_J[:, 0, 0] * (-fx / tz**2) + d_J[:, 1, 1] * (-fy / tz**2)
    d_t[:, 2] += d_J[:, 0, 2] * (2.0 * fx * p.txc / tz**3) + d_J[:, 1, 2] * (
        2.0 * fy * p.tyc / tz**3
    )
    d_txc = d_J[:, 0, 2] * (-fx / tz**2)
    d_tyc = d_J[:, 1, 2] * (-fy / tz**2)
    d_t[:, 0] += np.where(p.clamped_x, 0.0, d_txc)
    d_t[:, 2] += np.where(p.clamped_x, d_txc * (p.txc / tz), 0.0)
    d_t[:, 1] += np.where(p.clamped_y, 0.0, d_tyc)
    d_t[:, 2] += np.where(p.clamped_y, d_tyc * (p.tyc / tz), 0.0)
    # projection u = fx*tx/tz + cx, v = fy*ty/tz + cy (unclamped ratios)
    d_t[:, 0] += acc_uv[:, 0] * (fx / tz)
    d_t[:, 1] += acc_uv[:, 1] * (fy / tz)
    d_t[:, 2] += -acc_uv[:, 0] * fx * tx / tz**2 - acc_uv[:, 1] * fy * ty / tz**2
    # expected-depth numerator channel: z = t_cam.z
    d_t[:, 2] += acc_V[:, 1]

    d_mean = d_t @ W

    s2 = np.exp(2.0 * snapshot.log_scales[p.idx].astype(np.float64))
    d_R = 2.0 * np.einsum("nij,njk->nik", d_cov3d, p.R) * s2[:, None, :]
    RtGR = np.einsum("nji,njk,nkl->nil", p.R, d_cov3d, p.R)
    d_log_scales = np.stack([RtGR[:, k, k] * 2.0 * s2[:, k] for k in range(3)], axis=1)

    op = p.opacity
    d_logit = acc_opacity * op * (1.0 - op)

    # cluster twist gradients (omega about anchor, then v)
    ci = snapshot.cluster_index[p.idx]
    for row in range(len(snapshot.cluster_ids)):
        members = ci == row
        if not np.any(members):
            continue
        dm = d_mean[members]
        result.d_cluster_twists[row, 3:] = dm.sum(axis=0)
        means_world = snapshot.means[p.idx[members]].astype(np.float64)
        rel = means_world - snapshot.anchors[row]
        result.d_cluster_twists[row, :3] = np.cross(rel, dm).sum(axis=0)
        G = np.einsum("nij,nkj->nik", d_R[members], p.R[members])
        result.d_cluster_twists[row, :3] += np.stack(
            [
                G[:, 2, 1] - G[:, 1, 2],
                G[:, 0, 2] - G[:, 2, 0],
                G[:, 1, 0] - G[:, 0, 1],
            ],
            axis=1,
        ).sum(axis=0)

    if param_grads:
        result.d_means[p.idx] = d_mean
        result.d_quats[p.idx] = _quat_grad_from_rotation_grad(
            d_R, snapshot.quats[p.idx].astype(np.float64)
        )
        result.d_log_scales[p.idx] = d_log_scales
        result.d_opacity_logits[p.idx] = d_logit
        col = 2
        if channels.color:
            result.d_colors[p.idx] = acc_V[:, col : col + 3]
            col += 3
        if channels.feature:
            fd = snapshot.features.shape[1]
            result.d_features[p.idx] = acc_V[:, col : col + fd]
            col += fd
        if channels.group:
            gd = snapshot.groups.shape[1]
            result.d_groups[p.idx] = acc_V[:, col : col + gd]
    return result
