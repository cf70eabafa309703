"""Image and table file formats used for exported artifacts."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("PFM writer handles single-channel images only")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise ValueError(f"{path}: not a single-channel PFM")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h)
    return data.reshape(h, w)[::-1].astype(np.float32)


def write_rgb_png(path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def write_mask_png(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.min() < 0 or m.max() > 65535:
        raise ValueError("mask values must fit in 16 bits")
    Image.fromarray(m.astype(np.uint16)).save(path)


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.int64)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_ndjson(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
