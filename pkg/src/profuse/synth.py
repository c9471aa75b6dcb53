"""Procedural multi-view scenes with exact ground truth.

Objects are opaque analytic primitives (spheres and yawed boxes) seen by a
ring of cameras, so silhouettes, depths and co-visibility are exact and the
dense warps are true reprojections. Masks, embeddings and warps can be
degraded with simple noise knobs to exercise the downstream stages.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container_io as cio
from .scene_model import Camera, MaskSet, ViewSet, WarpField

logger = logging.getLogger(__name__)

OUT_OF_IMAGE = -1.0


@dataclass(frozen=True)
class SynthSpec:
    object_count: int = 3
    object_kind: str = "sphere"  # sphere | box | mixed
    embedding_dim: int = 16
    view_count: int = 6
    width: int = 64
    height: int = 64
    fov_degrees: float = 50.0
    warp_jitter: float = 0.0
    confidence_corruption: float = 0.0
    mask_dropout: float = 0.0
    embedding_noise: float = 0.0
    seed: int = 0
    neighbors_k: int = 2
    neighbor_lambda: float = 0.5
    min_mask_pixels: int = 8
    camera_radius: float = 3.0
    camera_height: float = 1.3
    max_embedding_cosine: float = 0.9

    def __post_init__(self):
        if self.object_count < 1:
            raise ValueError("object_count must be >= 1")
        if self.view_count < 2:
            raise ValueError("view_count must be >= 2")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.object_kind not in ("sphere", "box", "mixed"):
            raise ValueError(f"unknown object_kind {self.object_kind!r}")
        for name in ("warp_jitter", "confidence_corruption", "mask_dropout", "embedding_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 1 <= self.neighbors_k < self.view_count:
            raise ValueError("neighbors_k must be in [1, view_count)")
        if self.max_embedding_cosine >= 0.99:
            raise ValueError("max_embedding_cosine must stay below 0.99")


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # sphere: (r, r, r); box: half extents
    yaw: float = 0.0

    @property
    def bounding_radius(self) -> float:
        return self.size[0] if self.kind == "sphere" else float(np.linalg.norm(self.size))

    def _to_local(self, p: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return p @ R  # R^T p per row

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Smallest positive ray parameter per ray, inf on a miss."""
        o = np.broadcast_to(origins, dirs.shape) - np.asarray(self.center)
        if self.kind == "sphere":
            r = self.size[0]
            b = np.einsum("...i,...i->...", dirs, o)
            cc = np.einsum("...i,...i->...", o, o) - r * r
            disc = b * b - cc
            root = np.sqrt(np.maximum(disc, 0.0))
            t0, t1 = -b - root, -b + root
            t = np.where(t0 > 1e-9, t0, t1)
            return np.where((disc >= 0) & (t > 1e-9), t, np.inf)
        po, pd = self._to_local(o), self._to_local(dirs)
        h = np.asarray(self.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - po) / pd
            t2 = (h - po) / pd
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where((tmax >= tmin) & (t > 1e-9), t, np.inf)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(p, axis=-1) - self.size[0])
        q = np.abs(self._to_local(p)) - np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return np.abs(outside + inside)

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "sphere":
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            return np.asarray(self.center) + self.size[0] * d
        h = np.asarray(self.size)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        local = rng.uniform(-1, 1, size=(n, 3)) * h
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        local[np.arange(n), axis] = sign * h[axis]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ R.T + np.asarray(self.center)


@dataclass
class GroundTruth:
    """Exact scene facts for the oracles: embeddings, mask owners, per-pixel surface."""

    objects: list[Primitive]
    object_embeddings: np.ndarray
    mask_objects: dict[int, np.ndarray]  # view -> (K_i,) object index per mask id-1
    object_maps: dict[int, np.ndarray]  # view -> (H, W) object index + 1, 0 = background
    surface_points: dict[int, np.ndarray]  # view -> (H, W, 3), NaN on background
    seed_used: int = 0
    dropped: list[tuple[int, int]] = field(default_factory=list)  # (view, object) masks removed

    def surface_distances(self, points: np.ndarray) -> np.ndarray:
        """(N, C) unsigned distance from each point to each object's surface."""
        return np.stack([o.surface_distance(points) for o in self.objects], axis=1)

    def nearest_object(self, points: np.ndarray) -> np.ndarray:
        return np.argmin(self.surface_distances(points), axis=1)

    def silhouette(self, view: int, obj: int) -> np.ndarray:
        return self.object_maps[view] == obj + 1


def raycast(objects: list[Primitive], origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and object index (-1 on a miss) for each ray."""
    ts = np.stack([o.intersect(origin, dirs) for o in objects], axis=0)
    idx = np.argmin(ts, axis=0)
    t = np.take_along_axis(ts, idx[None], axis=0)[0]
    return t, np.where(np.isfinite(t), idx, -1)


def look_at(center: np.ndarray, target: np.ndarray, K: np.ndarray, width: int, height: int) -> Camera:
    f = target - center
    f /= np.linalg.norm(f)
    r = np.cross(f, [0.0, 0.0, 1.0])
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ center
    return Camera(K, T, width, height)


def select_neighbors(views, reference: int, k: int, lam: float = 0.5) -> list[int]:
    """Rank the other views by ``cos(dir_ref, dir_j) - lam * dist / dist_max``.

    ``views`` is a :class:`ViewSet` or a mapping of view id to :class:`Camera`.
    Ties (scores equal to 12 decimals) fall back to ascending view id.
    """
    cameras = views.cameras if isinstance(views, ViewSet) else views
    others = sorted(v for v in cameras if v != reference)
    if not 1 <= k <= len(others):
        raise ValueError(f"k must be in [1, {len(others)}], got {k}")
    ref = cameras[reference]
    dirs = np.array([cameras[v].viewing_direction for v in others])
    dists = np.array([np.linalg.norm(cameras[v].center - ref.center) for v in others])
    dmax = dists.max()
    score = dirs @ ref.viewing_direction - lam * (dists / dmax if dmax > 0 else 0.0)
    # symmetric layouts give ties that differ only by rounding noise
    score = np.round(score, 12)
    order = np.lexsort((np.array(others), -score))
    return [others[i] for i in order[:k]]


def neighbor_pairs(views, k: int, lam: float = 0.5) -> list[tuple[int, int]]:
    """Unordered (low, high) view pairs from every reference's top-k neighbours."""
    cameras = views.cameras if isinstance(views, ViewSet) else views
    pairs = set()
    for ref in sorted(cameras):
        for nb in select_neighbors(cameras, ref, k, lam):
            pairs.add((min(ref, nb), max(ref, nb)))
    return sorted(pairs)


def _layout(spec: SynthSpec, rng: np.random.Generator) -> list[Primitive]:
    objects: list[Primitive] = []
    attempts = 0
    while len(objects) < spec.object_count:
        attempts += 1
        if attempts > 10_000:
            raise RuntimeError("could not place objects without overlap")
        kind = spec.object_kind
        if kind == "mixed":
            kind = "sphere" if rng.random() < 0.5 else "box"
        spread = 0.3 + 0.3 * math.sqrt(spec.object_count)
        xy = rng.uniform(-spread, spread, size=2)
        if kind == "sphere":
            r = rng.uniform(0.25, 0.4)
            prim = Primitive("sphere", (xy[0], xy[1], r), (r, r, r))
        else:
            h = rng.uniform(0.18, 0.3, size=3)
            prim = Primitive("box", (xy[0], xy[1], h[2]), tuple(h), float(rng.uniform(0, math.pi)))
        if all(np.linalg.norm(np.subtract(prim.center, o.center)) > prim.bounding_radius + o.bounding_radius + 0.1
               for o in objects):
            objects.append(prim)
    return objects


def _cameras(spec: SynthSpec, rng: np.random.Generator) -> dict[int, Camera]:
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_degrees) / 2)
    K = np.array([[f, 0, spec.width / 2], [0, f, spec.height / 2], [0, 0, 1]])
    cams = {}
    for v in range(spec.view_count):
        az = 2 * math.pi * v / spec.view_count + rng.uniform(-0.1, 0.1)
        rad = spec.camera_radius * (1 + rng.uniform(-0.05, 0.05))
        z = spec.camera_height + rng.uniform(-0.2, 0.2)
        center = np.array([rad * math.cos(az), rad * math.sin(az), z])
        target = np.array([0.0, 0.0, 0.3]) + rng.uniform(-0.05, 0.05, size=3)
        cams[v] = look_at(center, target, K, spec.width, spec.height)
    return cams


def _degenerate(cameras: dict[int, Camera], objects: list[Primitive]) -> bool:
    """True when, for some object, every camera centre lies on one line through it."""
    for o in objects:
        d = np.array([c.center - np.asarray(o.center) for c in cameras.values()])
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        if np.all(np.abs(d @ d[0]) > 1 - 1e-9):
            return True
    return False


def _embeddings(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    rows: list[np.ndarray] = []
    while len(rows) < spec.object_count:
        e = rng.normal(size=spec.embedding_dim)
        e /= np.linalg.norm(e)
        if all(abs(float(e @ r)) < spec.max_embedding_cosine for r in rows):
            rows.append(e)
    return np.array(rows)


def _render_view(cam: Camera, objects: list[Primitive]):
    origin, dirs = cam.rays(cam.pixel_centers())
    t, idx = raycast(objects, origin, dirs)
    points = origin + np.where(np.isfinite(t), t, np.nan)[..., None] * dirs
    return (idx + 1).astype(np.uint16), points


def _warp(spec, objects, cam_j, cam_i, omap_j, pts_j, rng):
    H, W = omap_j.shape
    warp = np.full((2, H, W), OUT_OF_IMAGE)
    conf = np.zeros((H, W))
    fg = omap_j > 0
    X = pts_j[fg]
    uv, z = cam_i.project(X)
    in_front = z > 1e-6
    seg = X - cam_i.center
    dist = np.linalg.norm(seg, axis=1)
    t, _ = raycast(objects, cam_i.center, seg / dist[:, None])
    unoccluded = t >= dist * (1 - 1e-6)
    if spec.warp_jitter > 0:
        uv = uv + rng.normal(scale=spec.warp_jitter, size=uv.shape)
    uv = np.where(in_front[:, None], uv, OUT_OF_IMAGE)
    covisible = in_front & unoccluded & cam_i.in_image(uv)
    warp[0][fg], warp[1][fg] = uv[:, 0], uv[:, 1]
    conf[fg] = covisible.astype(np.float64)
    if spec.confidence_corruption > 0:
        hit = rng.random((H, W)) < spec.confidence_corruption
        conf = np.where(hit, rng.random((H, W)), conf)
    return WarpField(-1, -1, warp, conf)


@dataclass
class SynthScene:
    views: ViewSet
    warps: list[WarpField]
    truth: GroundTruth


def generate_scene(spec: SynthSpec, max_attempts: int = 20) -> SynthScene:
    """Build a scene in memory (see :func:`generate` for the on-disk variant)."""
    seed = spec.seed
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, 0])
        objects = _layout(spec, rng)
        cameras = _cameras(spec, rng)
        if not _degenerate(cameras, objects):
            break
        logger.warning("degenerate camera layout for seed %d, regenerating", seed)
        seed = spec.seed + 1_000_003 * (attempt + 1)
    else:
        raise RuntimeError("no non-degenerate layout found")
    emb_obj = _embeddings(spec, rng)

    masks, colors, mask_objects, omaps, points, dropped = {}, {}, {}, {}, {}, []
    palette = np.random.default_rng([seed, 3]).uniform(0.2, 0.9, size=(spec.object_count, 3))
    for v, cam in cameras.items():
        vrng = np.random.default_rng([seed, 1, v])
        omap, pts = _render_view(cam, objects)
        counts = np.bincount(omap.ravel(), minlength=spec.object_count + 1)
        label = np.zeros_like(omap)
        owners, feats = [], []
        for o in range(spec.object_count):
            drop = vrng.random() < spec.mask_dropout
            if counts[o + 1] < spec.min_mask_pixels:
                continue
            if drop:
                dropped.append((v, o))
                continue
            owners.append(o)
            label[omap == o + 1] = len(owners)
            f = emb_obj[o] + spec.embedding_noise * vrng.normal(size=spec.embedding_dim)
            feats.append(f / np.linalg.norm(f))
        feats = np.array(feats, dtype=np.float64).reshape(-1, spec.embedding_dim)
        masks[v] = MaskSet(v, label, feats)
        rgb = np.zeros(omap.shape + (3,))
        rgb[omap > 0] = palette[omap[omap > 0].astype(int) - 1]
        colors[v] = rgb.astype(np.float32)
        mask_objects[v] = np.array(owners, dtype=np.int64)
        omaps[v], points[v] = omap, pts

    warps = []
    for a, b in neighbor_pairs(cameras, spec.neighbors_k, spec.neighbor_lambda):
        for j, i in ((a, b), (b, a)):
            prng = np.random.default_rng([seed, 2, j, i])
            w = _warp(spec, objects, cameras[j], cameras[i], omaps[j], points[j], prng)
            warps.append(WarpField(j, i, w.warp, w.confidence))

    views = ViewSet(cameras, masks, spec.embedding_dim, colors)
    truth = GroundTruth(objects, emb_obj, mask_objects, omaps, points, seed, dropped)
    return SynthScene(views, warps, truth)


def observed_points(scene: SynthScene, stride: int = 3, tau_alpha: float = 0.6) -> tuple[np.ndarray, np.ndarray]:
    """Surface points seen by at least two views, with their object labels.

    A pixel qualifies when one of its outgoing warps is confident; only such
    surface can be triangulated. Pixels are taken on a ``stride`` grid.
    """
    pts, labels = [], []
    for v in sorted(scene.truth.object_maps):
        omap = scene.truth.object_maps[v]
        covis = np.zeros(omap.shape, dtype=bool)
        for w in scene.warps:
            if w.src_view == v:
                covis |= w.confidence >= tau_alpha
        keep = ((omap > 0) & covis)[::stride, ::stride]
        pts.append(scene.truth.surface_points[v][::stride, ::stride][keep])
        labels.append(omap[::stride, ::stride][keep].astype(np.int64) - 1)
    return np.concatenate(pts), np.concatenate(labels)


def save_points(path, points: np.ndarray, labels: np.ndarray) -> None:
    cio.write_records(path, "points", {"points": np.asarray(points, np.float32),
                                       "labels": np.asarray(labels, np.int64).astype(np.uint16)})


def load_points(path) -> tuple[np.ndarray, np.ndarray]:
    _, r = cio.read_records(path, "points")
    return r["points"].astype(np.float64), r["labels"].astype(np.int64)


def save_truth(path, truth: GroundTruth) -> None:
    records = {"object_embeddings": truth.object_embeddings}
    for v in sorted(truth.object_maps):
        records[f"mask_objects_{v}"] = truth.mask_objects[v].astype(np.uint16)
        records[f"object_map_{v}"] = truth.object_maps[v]
        records[f"surface_{v}"] = truth.surface_points[v]
    attrs = {
        "objects": [asdict(o) for o in truth.objects],
        "seed_used": truth.seed_used,
        "dropped": [list(d) for d in truth.dropped],
        "views": sorted(truth.object_maps),
    }
    cio.write_records(path, "ground_truth", records, attrs)


def load_truth(path) -> GroundTruth:
    attrs, r = cio.read_records(path, "ground_truth")
    objects = [Primitive(o["kind"], tuple(o["center"]), tuple(o["size"]), o["yaw"]) for o in attrs["objects"]]
    views = attrs["views"]
    return GroundTruth(
        objects,
        r["object_embeddings"].astype(np.float64),
        {v: r[f"mask_objects_{v}"].astype(np.int64) for v in views},
        {v: r[f"object_map_{v}"] for v in views},
        {v: r[f"surface_{v}"].astype(np.float64) for v in views},
        attrs["seed_used"],
        [tuple(d) for d in attrs["dropped"]],
    )


def write_scene(scene: SynthScene, out_dir, spec: SynthSpec | None = None) -> Path:
    """Write manifest, per-view files, warps and the ground-truth sidecar; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for v, ms in scene.views.masks.items():
        stem = f"view{v:03d}"
        cio.save_array(out / f"{stem}_masks.pf", ms.label_map, "u16")
        cio.save_array(out / f"{stem}_emb.pf", ms.embeddings)
        cio.save_array(out / f"{stem}_rgb.pf", scene.views.colors[v])
        files[v] = {"masks": f"{stem}_masks.pf", "embeddings": f"{stem}_emb.pf", "colors": f"{stem}_rgb.pf"}
    warp_entries = []
    for w in scene.warps:
        name = f"warp_{w.src_view:03d}_{w.dst_view:03d}.pf"
        cio.save_warp(out / name, w)
        warp_entries.append((w.src_view, w.dst_view, name))
    save_truth(out / "ground_truth.pf", scene.truth)
    save_points(out / "points.pf", *observed_points(scene))
    cio.save_array(out / "classes.pf", scene.truth.object_embeddings)
    extra = {"ground_truth": "ground_truth.pf", "points": "points.pf", "classes": "classes.pf"}
    if spec is not None:
        extra["synth_spec"] = asdict(spec)
    manifest = out / "manifest.json"
    cio.write_manifest(manifest, scene.views, warp_entries, files, extra)
    return manifest


def generate(spec: SynthSpec, out_dir) -> tuple[Path, GroundTruth]:
    scene = generate_scene(spec)
    if scene.truth.seed_used != spec.seed:
        logger.warning("layout regenerated with seed %d", scene.truth.seed_used)
    return write_scene(scene, out_dir, spec), scene.truth
