"""PFM depth maps, binary/ASCII PLY point clouds, and PNG images."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a single-channel float map as little-endian PFM (scale -1.0)."""
    if data.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-d map, got shape {data.shape}")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValueError(f"{path}: only single-channel PFM is supported")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 4), dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def save_ply(path: str | Path, xyz: np.ndarray, rgb: np.ndarray, ascii_mode: bool = False) -> None:
    """Write vertices (x, y, z float32; red, green, blue uchar)."""
    n = len(xyz)
    fmt = "ascii 1.0" if ascii_mode else "binary_little_endian 1.0"
    header = (
        f"ply\nformat {fmt}\nelement vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    xyz = np.asarray(xyz, dtype=np.float32)
    rgb = np.asarray(rgb, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if ascii_mode:
            for p, c in zip(xyz, rgb):
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))
        else:
            rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            rec["xyz"] = xyz
            rec["rgb"] = rgb
            fh.write(rec.tobytes())


def load_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a PLY written by :func:`save_ply`; returns (xyz, rgb)."""
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        ascii_mode = False
        n = 0
        while True:
            line = fh.readline().strip()
            if line.startswith(b"format ascii"):
                ascii_mode = True
            elif line.startswith(b"element vertex"):
                n = int(line.split()[-1])
            elif line == b"end_header":
                break
            elif not line:
                raise ValueError(f"{path}: truncated header")
        if ascii_mode:
            rows = [fh.readline().split() for _ in range(n)]
            xyz = np.array([[float(v) for v in r[:3]] for r in rows], dtype=np.float32)
            rgb = np.array([[int(v) for v in r[3:6]] for r in rows], dtype=np.uint8)
        else:
            rec = np.frombuffer(fh.read(n * 15), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            xyz = rec["xyz"].copy()
            rgb = rec["rgb"].copy()
    return xyz.reshape(-1, 3), rgb.reshape(-1, 3)


def save_png(path: str | Path, image: np.ndarray) -> None:
    """Write an H x W x 3 float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG back to H x W x 3 float32 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0
