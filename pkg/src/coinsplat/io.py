"""Raster, mesh and checkpoint file formats.

Checkpoint blob layout (little-endian)::

    magic    8 bytes  b"COINSPLT"
    version  u8       currently 1
    count    u32      number of arrays
    per array:
      name_len u16, name (utf-8)
      dtype    u8     0 = float64, 1 = int64, 2 = uint8
      ndim     u8
      shape    ndim x u32
      data     raw C-order bytes
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"COINSPLT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1, np.dtype("uint8"): 2}


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# images


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    Image.fromarray(img).save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    """Float image in [0, 1], (H, W, 3) or (H, W) for grayscale."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return arr.astype(np.float64) / 255.0


def write_pfm(path, data) -> None:
    """Single-channel or RGB 32-bit float PFM, rows stored bottom-to-top."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        header = b"Pf\n"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
    else:
        raise FormatError(f"PFM needs (H, W) or (H, W, 3) data, got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * ch)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


# --------------------------------------------------------------------------
# meshes


def write_obj(path, vertices, faces) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Read the v/f subset of OBJ. Polygons are fan-triangulated."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            if len(idx) < 3:
                raise FormatError(f"{path}:{lineno}: face with fewer than 3 vertices")
            faces += [[idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1)]
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def load_parametric_mesh(base_path, blendshape_paths=(), weights=None):
    """Base OBJ plus blendshape OBJs of identical topology (stored as full meshes)."""
    from .gaussians import ParametricMesh

    verts, faces = read_obj(base_path)
    basis = []
    for p in blendshape_paths:
        v, f = read_obj(p)
        if v.shape != verts.shape or not np.array_equal(f, faces):
            raise FormatError(f"{p}: blendshape topology does not match {base_path}")
        basis.append(v - verts)
    return ParametricMesh(verts, faces, np.asarray(basis).reshape(-1, len(verts), 3), weights)


# --------------------------------------------------------------------------
# checkpoint blob


def write_blob(path, arrays: dict) -> None:
    chunks = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub" and arr.dtype != np.uint8:
            arr = arr.astype("<i8")
        code = _CODES[np.dtype(arr.dtype.name)]
        key = name.encode()
        chunks.append(struct.pack("<H", len(key)) + key)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_blob(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic header")
    version = buf[8]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", buf, 9)
    pos = 13
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode()
        pos += n
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += size
    return out
