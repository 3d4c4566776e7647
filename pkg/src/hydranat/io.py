"""Artifact files: PPM/PGM rasters, parameter manifests, run manifests."""

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .tensor import load_hnat, save_hnat

__all__ = [
    "to_uint8_rgb",
    "ppm_bytes",
    "pgm_bytes",
    "write_ppm",
    "write_pgm",
    "save_params",
    "load_params",
    "write_json_atomic",
]


def to_uint8_rgb(img):
    """Map a ``[3, H, W]`` image from ``[-1, 1]`` to ``[0, 255]`` with clamping (0 maps to 128)."""
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor((img + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def ppm_bytes(rgb):
    """Binary P6 stream of a ``[3, H, W]`` uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    _, h, w = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb.transpose(1, 2, 0)).tobytes()


def pgm_bytes(gray):
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray).tobytes()


def write_ppm(path, rgb):
    Path(path).write_bytes(ppm_bytes(rgb))


def write_pgm(path, gray):
    Path(path).write_bytes(pgm_bytes(gray))


def _file_name(name):
    return name.replace("/", "_") + ".hnat"


def save_params(directory, tensors):
    """One HNAT1 file per tensor plus ``params.json`` mapping name to file, shape and dtype."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, arr in tensors.items():
        fname = _file_name(name)
        save_hnat(directory / fname, arr)
        manifest[name] = {"file": fname, "shape": list(arr.shape), "dtype": "f32" if arr.dtype == np.float32 else "f64"}
    write_json_atomic(directory / "params.json", manifest)
    return directory / "params.json"


def load_params(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "params.json").read_text())
    out = {}
    for name, entry in manifest.items():
        arr = load_hnat(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise ValueError(f"{name}: file shape {arr.shape} disagrees with manifest {entry['shape']}")
        out[name] = arr
    return out


def write_json_atomic(path, doc):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
