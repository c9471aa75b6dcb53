"""Binary tensor containers, record bundles and the scene manifest.

Tensor container layout (all integers little-endian)::

    offset  size        field
    0       8           magic  b"PFTENSR1"
    8       4 (u32)     dtype code: 1 = f32, 2 = u16, 3 = u8
    12      4 (u32)     ndim
    16      8*ndim      shape, one u64 per axis
    ...     prod*size   payload, row-major

A *bundle* is a concatenation of containers. Its first container is a u8
tensor holding UTF-8 JSON ``{"kind", "records", "attrs"}``; the following
containers are the named records in the listed order.

Warp coordinates are continuous destination-pixel coordinates: pixel
``(x, y)`` has its centre at ``(x + 0.5, y + 0.5)``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .scene_model import Camera, GaussianScene, MaskSet, ViewSet, WarpField

MAGIC = b"PFTENSR1"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<u2"), 3: np.dtype("<u1")}
CODES = {"f32": 1, "u16": 2, "u8": 3}
_HEADER = struct.Struct("<8sII")

MANIFEST_FORMAT = "profuse-manifest/1"


class FormatError(ValueError):
    """Base class for malformed container files."""


class BadMagicError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


class PayloadShortError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class ManifestError(ValueError):
    pass


class MissingFileError(ManifestError, FileNotFoundError):
    pass


class DimensionMismatchError(ManifestError):
    pass


def _dtype_code(dtype) -> int:
    if isinstance(dtype, str) and dtype in CODES:
        return CODES[dtype]
    if isinstance(dtype, int) and dtype in DTYPES:
        return dtype
    dt = np.dtype(dtype).newbyteorder("<")
    for code, known in DTYPES.items():
        if known == dt:
            return code
    raise UnknownDtypeError(f"unsupported dtype {dtype!r}")


def encode_tensor(dtype, shape: Iterable[int], payload) -> bytes:
    code = _dtype_code(dtype)
    shape = tuple(int(s) for s in shape)
    arr = np.asarray(payload).astype(DTYPES[code], copy=False).ravel()
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeMismatchError(f"payload has {arr.size} elements, shape {shape} needs {int(np.prod(shape))}")
    head = _HEADER.pack(MAGIC, code, len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[str, tuple[int, ...], np.ndarray, int]:
    """Decode one container at ``offset``; returns (dtype name, shape, array, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise PayloadShortError("file too short for a container header")
    magic, code, ndim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if code not in DTYPES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    offset += _HEADER.size
    if len(buf) - offset < 8 * ndim:
        raise PayloadShortError("file too short for the shape table")
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    dt = DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - offset < nbytes:
        raise PayloadShortError(f"payload short: expected {nbytes} bytes, found {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
    name = {v: k for k, v in CODES.items()}[code]
    return name, tuple(shape), arr.copy(), offset + nbytes


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, dtype, shape, payload) -> None:
    _atomic_write(path, encode_tensor(dtype, shape, payload))


def read_tensor(path) -> tuple[str, tuple[int, ...], np.ndarray]:
    buf = Path(path).read_bytes()
    name, shape, arr, end = decode_tensor(buf)
    if end != len(buf):
        raise ShapeMismatchError(f"{path}: {len(buf) - end} trailing bytes after payload")
    return name, shape, arr


def save_array(path, arr: np.ndarray, dtype: str = "f32") -> None:
    arr = np.asarray(arr)
    write_tensor(path, dtype, arr.shape, arr)


def load_array(path) -> np.ndarray:
    return read_tensor(path)[2]


# -- bundles -----------------------------------------------------------------

def _default_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.uint8 or arr.dtype == bool:
        return "u8"
    if arr.dtype == np.uint16:
        return "u16"
    return "f32"


def write_records(path, kind: str, records: dict[str, np.ndarray], attrs: dict[str, Any] | None = None,
                  dtypes: dict[str, str] | None = None) -> None:
    dtypes = dtypes or {}
    names = list(records)
    header = json.dumps({"kind": kind, "records": names, "attrs": attrs or {}}, sort_keys=True).encode()
    parts = [encode_tensor("u8", (len(header),), np.frombuffer(header, np.uint8))]
    for name in names:
        arr = np.asarray(records[name])
        parts.append(encode_tensor(dtypes.get(name) or _default_dtype(arr), arr.shape, arr))
    _atomic_write(path, b"".join(parts))


def _read_header(buf: bytes, path) -> tuple[dict, int]:
    dtype, _, arr, offset = decode_tensor(buf)
    if dtype != "u8":
        raise FormatError(f"{path}: bundle header must be a u8 record")
    try:
        header = json.loads(arr.tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable bundle header ({exc})") from None
    return header, offset


def peek_records(path) -> dict:
    """Parse only the JSON header of a bundle."""
    return _read_header(Path(path).read_bytes(), path)[0]


def read_records(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    header, offset = _read_header(buf, path)
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise FormatError(f"{path}: expected a {expect_kind!r} bundle, found {header.get('kind')!r}")
    records = {}
    for name in header["records"]:
        _, _, arr, offset = decode_tensor(buf, offset)
        records[name] = arr
    if offset != len(buf):
        raise ShapeMismatchError(f"{path}: {len(buf) - offset} trailing bytes")
    return header.get("attrs", {}), records


# -- Gaussian scenes ---------------------------------------------------------

def save_scene(path, scene: GaussianScene, attrs: dict | None = None) -> None:
    records = {
        "positions": scene.positions,
        "scales": scene.scales,
        "rotations": scene.rotations,
        "opacities": scene.opacities,
        "colors": scene.colors,
    }
    if scene.descriptors is not None:
        records["descriptors"] = scene.descriptors
        records["labeled"] = scene.labeled.astype(np.uint8)
    write_records(path, "scene", records, attrs)


def load_scene(path) -> GaussianScene:
    _, r = read_records(path, "scene")
    labeled = r["labeled"].astype(bool) if "labeled" in r else None
    return GaussianScene(r["positions"], r["scales"], r["rotations"], r["opacities"], r["colors"],
                         r.get("descriptors"), labeled)


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class WarpRef:
    """Lazily loadable warp field listed in a manifest."""

    src_view: int
    dst_view: int
    path: Path

    @property
    def pair(self) -> tuple[int, int]:
        return self.src_view, self.dst_view

    def load(self) -> WarpField:
        _, r = read_records(self.path, "warp")
        return WarpField(self.src_view, self.dst_view, r["warp"], r["confidence"])


def save_warp(path, warp: WarpField) -> None:
    write_records(path, "warp", {"warp": warp.warp, "confidence": warp.confidence},
                  {"src": warp.src_view, "dst": warp.dst_view})


def _resolve(base: Path, rel: str, what: str) -> Path:
    p = base / rel
    if not p.is_file():
        raise MissingFileError(f"{what} file not found: {p}")
    return p


def load_manifest(path) -> tuple[ViewSet, list[WarpRef]]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: unsupported manifest format {doc.get('format')!r}")
    base = path.parent
    D = int(doc["descriptor_dim"])
    cameras, masks, colors = {}, {}, {}
    for v in doc["views"]:
        vid = int(v["id"])
        if vid in cameras:
            raise ManifestError(f"duplicate view id {vid}")
        cam = Camera(np.array(v["intrinsics"]), np.array(v["world_to_camera"]), v["width"], v["height"])
        label_map = load_array(_resolve(base, v["masks"], "mask"))
        emb = load_array(_resolve(base, v["embeddings"], "embedding"))
        if label_map.shape != (cam.height, cam.width):
            raise ManifestError(f"view {vid}: mask size {label_map.shape} differs from image size "
                                f"{(cam.height, cam.width)}")
        if emb.ndim != 2 or emb.shape[1] != D:
            raise DimensionMismatchError(f"view {vid}: embeddings have dimension {emb.shape[-1]}, "
                                         f"manifest declares D={D}")
        if v.get("colors"):
            rgb = load_array(_resolve(base, v["colors"], "color"))
            if rgb.shape != (cam.height, cam.width, 3):
                raise ManifestError(f"view {vid}: color image has shape {rgb.shape}")
            colors[vid] = rgb
        cameras[vid] = cam
        masks[vid] = MaskSet(vid, label_map, emb)
    warps = []
    seen = set()
    for w in doc.get("warps", []):
        src, dst = int(w["src"]), int(w["dst"])
        if src not in cameras or dst not in cameras:
            raise ManifestError(f"warp {src}->{dst} references an unknown view")
        if (src, dst) in seen:
            raise ManifestError(f"duplicate warp {src}->{dst}")
        seen.add((src, dst))
        p = _resolve(base, w["file"], "warp")
        if peek_records(p).get("kind") != "warp":
            raise ManifestError(f"{p}: not a warp bundle")
        warps.append(WarpRef(src, dst, p))
    return ViewSet(cameras, masks, D, colors), warps


def write_manifest(path, views: ViewSet, warps: list[tuple[int, int, str]],
                   files: dict[int, dict[str, str]], extra: dict | None = None) -> None:
    """Write a manifest; ``files[view]`` maps "masks"/"embeddings"/"colors" to relative paths."""
    doc = {
        "format": MANIFEST_FORMAT,
        "descriptor_dim": views.descriptor_dim,
        "views": [
            {
                "id": vid,
                "width": cam.width,
                "height": cam.height,
                "intrinsics": cam.intrinsics.tolist(),
                "world_to_camera": cam.world_to_camera.tolist(),
                **files[vid],
            }
            for vid, cam in sorted(views.cameras.items())
        ],
        "warps": [{"src": s, "dst": d, "file": f} for s, d, f in warps],
    }
    if extra:
        doc.update(extra)
    _atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


def manifest_document(path) -> dict:
    """Raw manifest JSON, including any extra keys written alongside the views."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None


def manifest_inputs(path) -> list[Path]:
    """The manifest plus every per-view and warp file it references, in a stable order."""
    path = Path(path)
    doc = manifest_document(path)
    files = [path]
    for v in sorted(doc.get("views", []), key=lambda v: v["id"]):
        files += [path.parent / v[k] for k in ("masks", "embeddings", "colors") if v.get(k)]
    files += [path.parent / w["file"] for w in sorted(doc.get("warps", []), key=lambda w: (w["src"], w["dst"]))]
    return files
