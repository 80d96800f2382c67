"""Binary PPM (P6) and PFM readers/writers.

PFM files are written little-endian (scale -1.0) with rows stored bottom to
top, as the format prescribes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[3,H,W]`` or ``[H,W,3]`` floats in [0,1] to ``[H,W,3]`` uint8."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img if img.shape[-1] == 3 else np.moveaxis(img, 0, -1)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = np.moveaxis(img, 0, -1)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    data = np.ascontiguousarray(to_uint8(img))
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while buf[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_ppm(path: str | Path) -> np.ndarray:
    """Returns ``[H, W, 3]`` uint8 (8-bit) or uint16 (16-bit) pixels."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _read_tokens(buf, 4)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = h * w * 3
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).reshape(h, w, 3)
    return arr.astype(np.uint16) if maxval >= 256 else arr.copy()


def write_pfm(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 2:
        header = "Pf"
        h, w = arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = "PF"
        h, w = arr.shape[:2]
    else:
        raise ValueError("PFM holds [H,W] or [H,W,3] arrays")
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, scale), pos = _read_tokens(buf, 4)
    if magic not in (b"Pf", b"PF"):
        raise ValueError(f"{path}: not a PFM file")
    w, h, scale = int(w), int(h), float(scale)
    endian = "<" if scale < 0 else ">"
    chans = 3 if magic == b"PF" else 1
    arr = np.frombuffer(buf, dtype=f"{endian}f4", count=h * w * chans, offset=pos)
    arr = arr.reshape((h, w, 3) if chans == 3 else (h, w))[::-1]
    return np.ascontiguousarray(arr.astype("<f4"))


_CMAP_ANCHORS = np.array(
    [
        [0.19, 0.07, 0.23],
        [0.27, 0.51, 0.96],
        [0.11, 0.90, 0.71],
        [0.64, 0.99, 0.24],
        [0.98, 0.73, 0.22],
        [0.89, 0.27, 0.05],
        [0.48, 0.02, 0.01],
    ]
)


def colorize(values: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Map a scalar field to an 8-bit ``[H,W,3]`` preview (invalid pixels black)."""
    values = np.asarray(values, dtype=np.float64)
    valid = np.isfinite(values) if valid is None else (valid & np.isfinite(values))
    out = np.zeros(values.shape + (3,))
    if valid.any():
        lo, hi = np.percentile(values[valid], [1, 99])
        t = np.clip((values - lo) / max(hi - lo, 1e-12), 0, 1)
        xs = np.linspace(0, 1, len(_CMAP_ANCHORS))
        for c in range(3):
            out[..., c] = np.interp(t, xs, _CMAP_ANCHORS[:, c])
        out[~valid] = 0
    return to_uint8(out)
