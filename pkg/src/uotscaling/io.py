"""CSV and PPM exchange formats."""

from __future__ import annotations

import csv
import os
import re

import numpy as np


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_marginal_csv(path, x, values) -> None:
    """Columns ``x,value``; 17 significant digits."""
    x = np.asarray(x, dtype=float)
    values = np.asarray(values, dtype=float)
    if x.ndim == 2 and x.shape[1] == 1:
        x = x[:, 0]
    if x.shape != values.shape or x.ndim != 1:
        raise ValueError("x and values must be vectors of equal length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "value"])
        for xi, vi in zip(x, values):
            w.writerow([_fmt(xi), _fmt(vi)])


def read_marginal_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["x", "value"]:
        raise ValueError(f"{path}: expected header x,value")
    data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float).reshape(-1, 2)
    return data[:, 0], data[:, 1]


def write_trajectory_csv(path, times, x, densities) -> None:
    """Columns ``t,x,value``, one block of rows per time step."""
    x = np.asarray(x, dtype=float).reshape(-1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "value"])
        for t, d in zip(times, densities):
            d = np.asarray(d, dtype=float).reshape(-1)
            if d.shape != x.shape:
                raise ValueError("density length does not match x")
            for xi, vi in zip(x, d):
                w.writerow([_fmt(t), _fmt(xi), _fmt(vi)])


def read_trajectory_csv(path):
    """Returns ``(times, x, densities)`` with densities of shape ``(T, n)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["t", "x", "value"]:
        raise ValueError(f"{path}: expected header t,x,value")
    data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float).reshape(-1, 3)
    times = list(dict.fromkeys(data[:, 0].tolist()))
    T = len(times)
    if T == 0:
        return np.zeros(0), np.zeros(0), np.zeros((0, 0))
    n = data.shape[0] // T
    if n * T != data.shape[0]:
        raise ValueError(f"{path}: ragged trajectory")
    block = data.reshape(T, n, 3)
    return np.array(times), block[0, :, 1], block[:, :, 2]


def write_table_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


# --------------------------------------------------------------------------
# PPM

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path) -> np.ndarray:
    """8-bit RGB image (P3 or P6) as a ``(h, w, 3)`` uint8 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PPM header") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise ValueError(f"{path}: only 8-bit images with positive size are supported")
    n = w * h * 3
    if magic == b"P6":
        body = raw[pos + 1:pos + 1 + n]
        if len(body) != n:
            raise ValueError(f"{path}: truncated pixel data")
        arr = np.frombuffer(body, dtype=np.uint8)
    elif magic == b"P3":
        text = re.sub(rb"#[^\n]*", b"", raw[pos:])
        vals = np.array(text.split(), dtype=np.int64) if text.strip() else np.zeros(0, np.int64)
        if vals.size != n or vals.min() < 0 or vals.max() > 255:
            raise ValueError(f"{path}: bad pixel data")
        arr = vals.astype(np.uint8)
    else:
        raise ValueError(f"{path}: not a P3/P6 image")
    return arr.reshape(h, w, 3).copy()


def write_ppm(path, image, binary: bool = True) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must have shape (h, w, 3)")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        if binary:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(img.tobytes())
        else:
            fh.write(f"P3\n{w} {h}\n255\n".encode())
            for row in img.reshape(h, -1):
                fh.write((" ".join(str(v) for v in row) + "\n").encode())


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
