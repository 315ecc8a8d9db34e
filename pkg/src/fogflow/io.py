"""Readers and writers for Middlebury .flo, PFM and binary PPM (P6)."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

FLO_MAGIC = b"PIEH"
MAX_DIM = 1 << 16


class FormatError(ValueError):
    """Malformed or truncated file."""


def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("refusing to write non-finite flow")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(flow.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Read a .flo file as an ``(H, W, 2)`` float32 array."""
    raw = Path(path).read_bytes()
    if raw[:4] != FLO_MAGIC:
        raise FormatError(f"bad .flo magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError("truncated .flo header")
    w, h = np.frombuffer(raw, dtype="<i4", count=2, offset=4)
    if not (0 < w < MAX_DIM and 0 < h < MAX_DIM):
        raise FormatError(f"implausible .flo extent {w}x{h}")
    need = 12 + 8 * int(w) * int(h)
    if len(raw) < need:
        raise FormatError(f"truncated .flo payload: {len(raw)} of {need} bytes")
    return np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2).copy()


_TOKEN = re.compile(rb"\s*(#[^\n]*\n|\S+)")


def _header_tokens(raw: bytes, count: int) -> tuple[list[bytes], int, list[str]]:
    """Pull ``count`` whitespace-separated tokens, collecting ``#`` comments.

    Returns the tokens, the payload offset (one whitespace byte after the
    last token) and the comment lines.
    """
    tokens: list[bytes] = []
    comments: list[str] = []
    pos = 0
    while len(tokens) < count:
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise FormatError("truncated header")
        pos = m.end()
        tok = m.group(1)
        if tok.startswith(b"#"):
            comments.append(tok[1:].strip().decode(errors="replace"))
        else:
            tokens.append(tok)
    return tokens, pos + 1, comments


def _dims(w_tok: bytes, h_tok: bytes) -> tuple[int, int]:
    try:
        w, h = int(w_tok), int(h_tok)
    except ValueError as exc:
        raise FormatError("malformed dimensions") from exc
    if not (0 < w < MAX_DIM and 0 < h < MAX_DIM):
        raise FormatError(f"dimension overflow: {w}x{h}")
    return w, h


def write_pfm(path, data: np.ndarray, little_endian: bool = True) -> None:
    """Write a 1-channel ("Pf") or 3-channel ("PF") float image, rows bottom-up."""
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got {data.shape}")
    h, w = data.shape[:2]
    dtype = "<f4" if little_endian else ">f4"
    scale = b"-1.0" if little_endian else b"1.0"
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}".encode() + b"\n" + scale + b"\n")
        f.write(np.ascontiguousarray(data[::-1]).astype(dtype).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM as float32, ``(H, W)`` for "Pf" and ``(H, W, 3)`` for "PF"."""
    raw = Path(path).read_bytes()
    tokens, offset, _ = _header_tokens(raw, 4)
    tag, w_tok, h_tok, scale_tok = tokens
    if tag not in (b"Pf", b"PF"):
        raise FormatError(f"bad PFM tag {tag!r}")
    w, h = _dims(w_tok, h_tok)
    try:
        scale = float(scale_tok)
    except ValueError as exc:
        raise FormatError("malformed PFM scale") from exc
    if scale == 0:
        raise FormatError("PFM scale must be non-zero")
    channels = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * channels
    if len(raw) - offset < 4 * n:
        raise FormatError("truncated PFM payload")
    arr = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape)[::-1].copy()


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray, comment: str | None = None) -> None:
    """Write an 8-bit binary PPM; values in [0, 1] (or already uint8)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {image.shape}")
    data = image if image.dtype == np.uint8 else quantize(image)
    h, w = data.shape[:2]
    header = b"P6\n"
    if comment:
        header += b"".join(b"# " + line.encode() + b"\n" for line in comment.splitlines())
    header += f"{w} {h}\n255\n".encode()
    with open(path, "wb") as f:
        f.write(header + data.tobytes())


def read_ppm_bytes(path) -> tuple[np.ndarray, list[str]]:
    """Raw uint8 pixels plus any header comment lines."""
    raw = Path(path).read_bytes()
    tokens, offset, comments = _header_tokens(raw, 4)
    magic, w_tok, h_tok, max_tok = tokens
    if magic != b"P6":
        raise FormatError(f"bad PPM magic {magic!r}")
    w, h = _dims(w_tok, h_tok)
    if max_tok != b"255":
        raise FormatError("only maxval 255 is supported")
    if len(raw) - offset < 3 * w * h:
        raise FormatError("truncated PPM payload")
    data = np.frombuffer(raw, dtype=np.uint8, count=3 * w * h, offset=offset).reshape(h, w, 3)
    return data.copy(), comments


def read_ppm(path) -> np.ndarray:
    """Read a P6 image as float64 in [0, 1]."""
    return read_ppm_bytes(path)[0].astype(np.float64) / 255.0
