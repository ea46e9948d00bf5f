"""Bit-exact file formats for bursts, HDR images, and sidecar metadata.

Three formats cover the pipeline:

- PFM (portable float map) for linear-light HDR images: 32-bit floats,
  little-endian (signaled by the negative scale), rows stored bottom-up;
- 16-bit binary PGM for raw frame DN data: big-endian samples, maxval
  equals the sensor's 2^q - 1;
- meta.json for everything else: exposures as EV, noise coefficients,
  sensor description, optional ground-truth warps.  Unknown keys survive
  a read-modify-write cycle so sidecars can carry foreign annotations.

All writers are replay-stable: write(read(write(x))) produces identical
bytes.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .model import (
    AffineWarpField,
    BayerPattern,
    BurstMeta,
    SensorConfig,
)


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, img: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) float image as little-endian PFM."""
    img = np.asarray(img)
    if img.ndim == 2:
        header = b"Pf\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM holds 1- or 3-channel images, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("refusing to write non-finite values to PFM")
    h, w = img.shape[:2]
    data = np.flipud(img).astype("<f4")  # PFM rows run bottom-up
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array, (H, W) or (H, W, 3)."""
    blob = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", blob)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    kind, w, h = m.group(1), int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    offset = m.end()
    count = w * h * channels
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    if data.size != count:
        raise ValueError(f"{path}: truncated PFM payload")
    img = data.reshape((h, w, channels) if channels == 3 else (h, w))
    img = np.flipud(img).astype(np.float32)
    return np.ascontiguousarray(img)


# ---------------------------------------------------------------------------
# 16-bit PGM
# ---------------------------------------------------------------------------


def write_pgm16(path, dn: np.ndarray, maxval: int) -> None:
    """Write integer DN data as 16-bit binary PGM (big-endian samples)."""
    dn = np.asarray(dn)
    if dn.ndim != 2:
        raise ValueError(f"PGM holds 2-D images, got shape {dn.shape}")
    if not 255 < maxval < 65536:
        raise ValueError(f"16-bit PGM needs maxval in [256, 65535], got {maxval}")
    if dn.min() < 0 or dn.max() > maxval:
        raise ValueError(f"DN values exceed maxval {maxval}")
    h, w = dn.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(dn.astype(">u2").tobytes())


def read_pgm16(path) -> tuple[np.ndarray, int]:
    """Read a 16-bit binary PGM; returns (uint16 array, maxval)."""
    blob = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval <= 255:
        raise ValueError(f"{path}: 8-bit PGM not supported (maxval {maxval})")
    data = np.frombuffer(blob, dtype=">u2", count=w * h, offset=m.end())
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.uint16), maxval


# ---------------------------------------------------------------------------
# PPM preview (8-bit, for tone-mapped previews only)
# ---------------------------------------------------------------------------


def write_ppm(path, rgb8: np.ndarray) -> None:
    rgb8 = np.asarray(rgb8)
    if rgb8.ndim != 3 or rgb8.shape[2] != 3 or rgb8.dtype != np.uint8:
        raise ValueError("PPM preview expects (H, W, 3) uint8")
    h, w = rgb8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb8.tobytes())


# ---------------------------------------------------------------------------
# meta.json sidecar
# ---------------------------------------------------------------------------

_REQUIRED_TOP = ("K", "k0", "s", "sensor", "frames")
_REQUIRED_SENSOR = ("q", "b", "c", "pattern")
_REQUIRED_FRAME = ("ev", "alpha", "beta")


def write_meta(path, doc: dict) -> None:
    """Write the sidecar; key order canonicalized so rewrites are stable."""
    _validate_meta(doc)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_meta(path) -> dict:
    """Read and validate the sidecar; unknown keys are kept as-is."""
    doc = json.loads(Path(path).read_text())
    _validate_meta(doc)
    return doc


def _validate_meta(doc: dict) -> None:
    for key in _REQUIRED_TOP:
        if key not in doc:
            raise ValueError(f"meta.json missing required key '{key}'")
    for key in _REQUIRED_SENSOR:
        if key not in doc["sensor"]:
            raise ValueError(f"meta.json missing required key 'sensor.{key}'")
    if len(doc["frames"]) != doc["K"]:
        raise ValueError(
            f"meta.json K={doc['K']} but {len(doc['frames'])} frame entries"
        )
    for i, fr in enumerate(doc["frames"]):
        for key in _REQUIRED_FRAME:
            if key not in fr:
                raise ValueError(f"meta.json missing required key 'frames[{i}].{key}'")
    if not 0 <= doc["k0"] < doc["K"]:
        raise ValueError(f"meta.json k0={doc['k0']} out of range for K={doc['K']}")


def sensor_from_meta(doc: dict) -> SensorConfig:
    sd = doc["sensor"]
    return SensorConfig(
        bit_depth=int(sd["q"]),
        black_level=int(sd["b"]),
        white_level=int(sd["c"]),
        alpha=float(doc["frames"][0]["alpha"]),
        beta=float(doc["frames"][0]["beta"]),
        pattern=BayerPattern(sd["pattern"]),
    )


def sensor_to_meta(sensor: SensorConfig) -> dict:
    return {
        "q": sensor.bit_depth,
        "b": sensor.black_level,
        "c": sensor.white_level,
        "pattern": sensor.pattern.value,
    }


def meta_from_doc(doc: dict) -> BurstMeta:
    exposures = [2.0 ** fr["ev"] for fr in doc["frames"]]
    return BurstMeta(
        exposures=np.array(exposures),
        k0=int(doc["k0"]),
        scale=int(doc["s"]),
        sensor=sensor_from_meta(doc),
    )


def jsonable(value):
    """Recursively convert numpy containers/scalars for json.dump."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def write_warps(path, fields, k0: int, s: int, diagnostics=None) -> None:
    """Serialize estimated warp fields (per-tile 2x3 affines, HR units)."""
    doc = {
        "k0": int(k0),
        "s": int(s),
        "tile_size": int(fields[k0].tile_size),
        "fields": [
            {
                "shape": list(f.shape),
                "reference": bool(f.reference),
                "tiles": f.params.tolist(),
            }
            for f in fields
        ],
    }
    if diagnostics is not None:
        doc["diagnostics"] = jsonable(diagnostics)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_warps(path) -> dict:
    """Inverse of write_warps; 'fields' holds AffineWarpField objects."""
    with open(path) as f:
        doc = json.load(f)
    for key in ("k0", "s", "tile_size", "fields"):
        if key not in doc:
            raise ValueError(f"warps file missing required key '{key}'")
    fields = []
    for i, fd in enumerate(doc["fields"]):
        params = np.asarray(fd["tiles"], dtype=np.float64)
        if params.ndim != 4 or params.shape[2:] != (2, 3):
            raise ValueError(f"warps file field {i}: tiles must be (ny, nx, 2, 3)")
        fields.append(
            AffineWarpField(
                shape=tuple(fd["shape"]),
                params=params,
                tile_size=int(doc["tile_size"]),
                reference=bool(fd.get("reference", False)),
            )
        )
    out = dict(doc)
    out["fields"] = fields
    return out


def gt_fields_from_doc(
    doc: dict,
    frame_shape: tuple[int, int],
    scale: int | None = None,
    tile_size: int = 200,
) -> list[AffineWarpField] | None:
    """Ground-truth warp fields from the sidecar, if present.

    Sidecar warps are stored in the synthesis grid's pixel units; when a
    different reconstruction scale is requested the translation part is
    rescaled accordingly (the linear part is unit-free).
    """
    if any("warp" not in fr for fr in doc["frames"]):
        return None
    s_meta = int(doc["s"])
    s_out = s_meta if scale is None else int(scale)
    factor = s_out / s_meta
    shape = (s_out * frame_shape[0], s_out * frame_shape[1])
    fields = []
    for i, fr in enumerate(doc["frames"]):
        m = np.asarray(fr["warp"], dtype=np.float64).reshape(2, 3)
        m[:, 2] *= factor
        if i == doc["k0"]:
            fields.append(AffineWarpField.identity(shape, tile_size, reference=True))
        else:
            fields.append(AffineWarpField.from_global(m, shape, tile_size))
    return fields
