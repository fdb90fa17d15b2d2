"""On-disk formats: checkpoint binaries, metrics CSV, PGM/PPM heatmaps."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import re
import struct
import zlib

import numpy as np

from .errors import DataError

MAGIC = b"DPCN"
VERSION = 1


# ---- checkpoints -------------------------------------------------------------------

def encode_checkpoint(state: dict[str, np.ndarray]) -> bytes:
    """Serialize a name -> array table; arrays are stored as little-endian float32."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise DataError("not a DPCN checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DataError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos, state = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", body, pos)
            dims = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            size = 4 * math.prod(dims)
            if pos + size > len(body):
                raise DataError(f"checkpoint truncated inside {name!r}")
            state[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
            pos += size
    except struct.error as exc:
        raise DataError(f"checkpoint truncated: {exc}") from None
    if pos != len(body):
        raise DataError("trailing bytes after checkpoint table")
    return state


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    blob = encode_checkpoint(state)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ---- metrics CSV -------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, str):
        return value
    value = float(value)
    return "nan" if math.isnan(value) else f"{value:.6f}"


def write_metrics_csv(path, records, columns: list[str] | None = None) -> None:
    """Header plus one row per record, floats at six decimals."""
    from .training import MetricsRecord

    columns = columns or MetricsRecord.columns()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            row = dataclasses.asdict(rec) if dataclasses.is_dataclass(rec) else dict(rec)
            writer.writerow([_fmt(row[c]) for c in columns])


def read_metrics_csv(path) -> list[dict]:
    """Parse a metrics CSV back; integer-looking cells become int, the rest float or str."""
    def parse(cell: str):
        try:
            return int(cell)
        except ValueError:
            pass
        try:
            return float(cell)
        except ValueError:
            return cell

    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---- images ------------------------------------------------------------------------

def _to_bytes(grid: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(grid, dtype=float) * 255), 0, 255).astype(np.uint8)


def write_pgm(path, grid: np.ndarray) -> None:
    """Binary graymap of a [0, 1] grid."""
    pix = _to_bytes(grid)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise DataError(f"{path}: not a binary PGM")
    w, h = int(m[1]), int(m[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def jet(values: np.ndarray) -> np.ndarray:
    """Blue-to-red colour ramp, (H, W) in [0, 1] -> (H, W, 3) in [0, 1]."""
    v = np.clip(values, 0, 1)[..., None]
    centres = np.array([0.75, 0.5, 0.25])  # r, g, b
    return np.clip(1.5 - np.abs(4 * v - 4 * centres), 0, 1)


def write_ppm_overlay(path, image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> None:
    """Binary pixmap of ``heat`` blended over a (3, H, W) image in [0, 1]."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1:] != heat.shape:
        raise ValueError(f"image {img.shape} does not match heatmap {heat.shape}")
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    blend = (1 - alpha) * img.transpose(1, 2, 0) + alpha * jet(heat)
    pix = _to_bytes(blend)
    h, w = heat.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
