"""Readers and writers for the on-disk formats.

* LDEP  depth image: ``b"LDEP"``, u32 width, u32 height, u8 semantics, f32 samples.
* SLAB  soft labels: ``b"SLAB"``, u32 N, u32 C, N*C f32 probabilities.
* PPM   binary P6 RGB, 8 bits per channel.
* ``.labels``  raw little-endian u16 per pixel, 65535 marking unknown.
* PLY   ASCII subset: vertex x y z (float), red green blue (uchar), optional label (int).

All integers and floats are little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import FormatError, MissingFileError
from .geom import CameraIntrinsics, DepthImage, DepthSemantics, PanoramicCamera

LABEL_SENTINEL = 65535


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such file: {path}")
    return path.read_bytes()


def write_ldep(path, depth: DepthImage) -> None:
    header = b"LDEP" + struct.pack("<IIB", depth.width, depth.height, int(depth.semantics))
    Path(path).write_bytes(header + depth.values.astype("<f4").tobytes())


def read_ldep(path) -> DepthImage:
    raw = _read_bytes(path)
    if raw[:4] != b"LDEP" or len(raw) < 13:
        raise FormatError(f"{path}: not an LDEP file")
    width, height, sem = struct.unpack_from("<IIB", raw, 4)
    body = raw[13:]
    if len(body) != 4 * width * height:
        raise FormatError(f"{path}: expected {width * height} samples, found {len(body) // 4}")
    if sem not in (0, 1):
        raise FormatError(f"{path}: unknown depth semantics {sem}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return DepthImage(width, height, values, DepthSemantics(sem))


def write_slab(path, probs: np.ndarray) -> None:
    probs = np.asarray(probs)
    probs = probs.reshape(-1, probs.shape[-1])
    n, c = probs.shape
    Path(path).write_bytes(b"SLAB" + struct.pack("<II", n, c) + probs.astype("<f4").tobytes())


def read_slab(path) -> np.ndarray:
    """Return an ``(N, C)`` float64 array of probabilities."""
    raw = _read_bytes(path)
    if raw[:4] != b"SLAB" or len(raw) < 12:
        raise FormatError(f"{path}: not a SLAB file")
    n, c = struct.unpack_from("<II", raw, 4)
    body = raw[12:]
    if len(body) != 4 * n * c:
        raise FormatError(f"{path}: truncated SLAB payload")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(n, c)


def quantize_colors(rgb: np.ndarray) -> np.ndarray:
    """Round colors in [0, 1] to the nearest 8-bit level, as stored on disk."""
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    h, w, _ = rgb.shape
    data = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = _read_bytes(path)
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:pos + 1 + 3 * w * h]
    if len(body) != 3 * w * h:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_label_image(path, labels: np.ndarray) -> None:
    lab = np.asarray(labels).reshape(-1)
    out = np.where(lab < 0, LABEL_SENTINEL, lab).astype("<u2")
    Path(path).write_bytes(out.tobytes())


def read_label_image(path, width: int, height: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) != 2 * width * height:
        raise FormatError(f"{path}: expected {width * height} u16 labels")
    lab = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    lab[lab == LABEL_SENTINEL] = -1
    return lab.reshape(height, width)


def write_camera(path, camera) -> None:
    if isinstance(camera, PanoramicCamera):
        text = "panoramic\n"
    else:
        text = f"{camera.fx!r} {camera.fy!r} {camera.cx!r} {camera.cy!r}\n"
    Path(path).write_text(text)


def read_camera(path):
    text = _read_bytes(path).decode("ascii").strip()
    if text == "panoramic":
        return PanoramicCamera()
    try:
        fx, fy, cx, cy = (float(t) for t in text.split())
    except ValueError as exc:
        raise FormatError(f"{path}: expected 'fx fy cx cy' or 'panoramic'") from exc
    return CameraIntrinsics(fx, fy, cx, cy)


def write_ply(path, cloud: PointCloud) -> None:
    """Write an ASCII PLY; positions use round-trip float formatting."""
    has_label = cloud.hard_labels is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if has_label:
        lines.append("property int label")
    lines.append("end_header")
    rgb = np.round(np.clip(cloud.colors, 0.0, 1.0) * 255.0).astype(int)
    for i in range(len(cloud)):
        x, y, z = (repr(float(v)) for v in cloud.positions[i])
        row = f"{x} {y} {z} {rgb[i, 0]} {rgb[i, 1]} {rgb[i, 2]}"
        if has_label:
            row += f" {int(cloud.hard_labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    text = _read_bytes(path).decode("ascii")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: missing 'ply' magic")
    n = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = i + 1
            break
    if n is None or body_start is None:
        raise FormatError(f"{path}: malformed PLY header")
    for required in ("x", "y", "z", "red", "green", "blue"):
        if required not in props:
            raise FormatError(f"{path}: vertex property '{required}' missing")
    rows = [ln.split() for ln in lines[body_start:body_start + n]]
    if len(rows) != n or any(len(r) < len(props) for r in rows):
        raise FormatError(f"{path}: expected {n} vertex rows")
    col = {name: k for k, name in enumerate(props)}
    table = np.array([[float(r[col[p]]) for p in props] for r in rows], dtype=np.float64).reshape(n, -1)
    positions = table[:, [col["x"], col["y"], col["z"]]]
    colors = table[:, [col["red"], col["green"], col["blue"]]] / 255.0
    labels = table[:, col["label"]].astype(np.int64) if "label" in col else None
    return PointCloud(positions=positions, colors=colors, hard_labels=labels)
