"""Shared on-disk formats: .f32 float blobs, PNGs, ASCII PLY, key-value
config files. Byte layouts are documented in docs/formats.md."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

F32_MAGIC = b"F32B"


def write_f32(path, array: np.ndarray) -> None:
    """Raw float32 blob: magic "F32B", u32 height, u32 width, u32 channels,
    then little-endian float32 data in row-major order."""
    array = np.asarray(array, dtype="<f4")
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC array, got shape {array.shape}")
    h, w, c = array.shape
    with open(path, "wb") as f:
        f.write(F32_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(array).tobytes())


def read_f32(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != F32_MAGIC:
        raise ValueError(f"{path}: not an .f32 blob")
    h, w, c = struct.unpack("<III", blob[4:16])
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: payload size mismatch")
    return data.reshape(h, w, c).copy()


def write_png(path, image: np.ndarray) -> None:
    """8-bit PNG from float [0,1] (HxW grayscale or HxWx3 color) or uint8."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path))


def write_ply(path, points: np.ndarray) -> int:
    """ASCII PLY point cloud (element vertex; float x/y/z). Returns count."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {points.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    body = "\n".join(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in points)
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines))
        f.write("\n")
        if points.shape[0]:
            f.write(body)
            f.write("\n")
    return int(points.shape[0])


def read_ply(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as f:
        lines = [ln.strip() for ln in f]
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    count = 0
    header_end = 0
    for i, ln in enumerate(lines):
        if ln.startswith("element vertex"):
            count = int(ln.split()[-1])
        if ln == "end_header":
            header_end = i + 1
            break
    pts = [tuple(float(v) for v in ln.split()[:3]) for ln in lines[header_end : header_end + count]]
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def _parse_scalar(text: str):
    text = text.strip()
    if text.startswith('"') and text.endswith('"'):
        return text[1:-1]
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part) for part in _split_top_level(inner)]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _split_top_level(text: str) -> list[str]:
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(text):
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(text[start:i])
            start = i + 1
    parts.append(text[start:])
    return parts


def read_kv_config(path) -> dict:
    """TOML-style key/value file: `key = value` lines, `[section]` tables,
    repeated `[[section]]` blocks become lists of tables. Supports strings,
    numbers, booleans, and flat lists."""
    root: dict = {}
    current: dict = root
    for raw_line in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[[") and line.endswith("]]"):
            name = line[2:-2].strip()
            root.setdefault(name, [])
            current = {}
            root[name].append(current)
        elif line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            current = root.setdefault(name, {})
        else:
            key, _, value = line.partition("=")
            if not _:
                raise ValueError(f"{path}: malformed line {raw_line!r}")
            current[key.strip()] = _parse_scalar(value)
    return root


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_format_scalar(v) for v in value) + "]"
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    return repr(int(value)) if isinstance(value, (np.integer, int)) else repr(value)


def write_kv_config(path, data: dict) -> None:
    lines: list[str] = []
    tables: list[tuple[str, object]] = []
    for key, value in data.items():
        if isinstance(value, dict) or (
            isinstance(value, list) and value and isinstance(value[0], dict)
        ):
            tables.append((key, value))
        else:
            lines.append(f"{key} = {_format_scalar(value)}")
    for name, value in tables:
        if isinstance(value, dict):
            lines.append(f"\n[{name}]")
            lines.extend(f"{k} = {_format_scalar(v)}" for k, v in value.items())
        else:
            for entry in value:
                lines.append(f"\n[[{name}]]")
                lines.extend(f"{k} = {_format_scalar(v)}" for k, v in entry.items())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
