"""Report writers: diff-able CSV (stable column order, LF endings, '.'
decimals), JSON sidecars with sorted keys, and 8-bit PGM for saliency maps."""

from __future__ import annotations

import json

import numpy as np

from .errors import ArgumentError


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.12g" % float(v)
    return str(v)


def csv_text(header: list[str], rows: list) -> str:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ArgumentError(f"row {row!r} does not match header {header}")
        lines.append(",".join(format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path, header: list[str], rows: list) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(csv_text(header, rows))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_json(path, obj) -> None:
    with open(path, "w", newline="\n") as f:
        json.dump(_jsonable(obj), f, sort_keys=True, indent=2)
        f.write("\n")


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5) from a [H,W] array with values in [0,1]."""
    if image.ndim != 2:
        raise ArgumentError(f"PGM wants a 2-d map, got {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
