"""Core domain types shared by every pipeline stage.

Pixel convention used throughout the package: pixel ``(x, y)`` covers the
continuous square ``[x, x+1) x [y, y+1)`` so its centre sits at
``(x + 0.5, y + 0.5)``. Projections through the intrinsics land in these
continuous coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

UNIT_TOL = 1e-5


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariances(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """World-space covariances R diag(s^2) R^T, shape (N, 3, 3)."""
    R = quat_to_rotmat(rotations)
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


def normalize_rows(x: np.ndarray, eps: float = 0.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, eps) if eps else x / n


@dataclass(frozen=True)
class Camera:
    """Posed pinhole camera.

    Attributes:
        intrinsics: 3x3 upper-triangular matrix with fx, fy, cx, cy in pixels.
        world_to_camera: 4x4 rigid transform (camera looks down +z).
        width: Image width in pixels.
        height: Image height in pixels.
    """

    intrinsics: np.ndarray
    world_to_camera: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "world_to_camera", T)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        problems = self.problems()
        if problems:
            raise ValueError("invalid camera: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        K, T = self.intrinsics, self.world_to_camera
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            out.append("focal lengths must be positive")
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[2, 2] != 1:
            out.append("intrinsics must be upper-triangular with K[2,2]=1")
        R = T[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            out.append("rotation block is not orthonormal")
        if np.any(T[3] != [0, 0, 0, 1]):
            out.append("world_to_camera bottom row must be [0,0,0,1]")
        if self.width < 1 or self.height < 1:
            out.append("width and height must be >= 1")
        return out

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def viewing_direction(self) -> np.ndarray:
        """Optical axis in world coordinates (unit)."""
        return self.rotation[2].copy()

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns ((N,2) continuous pixel coords, (N,) depth)."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = (pc @ self.intrinsics.T)[..., :2] / z[..., None]
        return uv, z

    def rays(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space ray origin and unit directions through continuous pixel coords."""
        uv = np.asarray(uv, dtype=np.float64)
        homo = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        d_cam = np.linalg.solve(self.intrinsics, homo.reshape(-1, 3).T).T.reshape(homo.shape)
        d = d_cam @ self.rotation  # R^T d for each row
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return self.center, d

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv)
        return (
            np.isfinite(uv).all(axis=-1)
            & (uv[..., 0] >= 0) & (uv[..., 0] < self.width)
            & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)
        )

    def pixel_centers(self) -> np.ndarray:
        """(H, W, 2) continuous coordinates of every pixel centre."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        return np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(np.float64)


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray


@dataclass(frozen=True)
class GaussianScene:
    """Structure-of-arrays Gaussian set; ``scene[i]`` yields a :class:`Gaussian`.

    Arrays are stored as float32 so on-disk round trips are bit-exact.
    ``labeled`` marks Gaussians that received at least one registration hit;
    unlabeled ones carry a zero descriptor.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    descriptors: Optional[np.ndarray] = None
    labeled: Optional[np.ndarray] = None

    def __post_init__(self):
        f32 = lambda a, shape: np.ascontiguousarray(np.asarray(a, dtype=np.float32).reshape(shape))
        n = np.asarray(self.positions).reshape(-1, 3).shape[0]
        object.__setattr__(self, "positions", f32(self.positions, (n, 3)))
        object.__setattr__(self, "scales", f32(self.scales, (n, 3)))
        object.__setattr__(self, "rotations", f32(self.rotations, (n, 4)))
        object.__setattr__(self, "opacities", f32(self.opacities, (n,)))
        object.__setattr__(self, "colors", f32(self.colors, (n, 3)))
        if self.descriptors is not None:
            d = np.asarray(self.descriptors)
            object.__setattr__(self, "descriptors", f32(d, (n, d.shape[-1])))
            if self.labeled is None:
                labeled = np.linalg.norm(self.descriptors, axis=1) > 0
                object.__setattr__(self, "labeled", labeled)
        if self.labeled is not None:
            object.__setattr__(self, "labeled", np.asarray(self.labeled, dtype=bool).reshape(n))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.scales[i], self.rotations[i],
                        float(self.opacities[i]), self.colors[i])

    @property
    def gaussians(self) -> list[Gaussian]:
        return [self[i] for i in range(len(self))]

    @property
    def descriptor_dim(self) -> int:
        return 0 if self.descriptors is None else self.descriptors.shape[1]

    def covariances(self) -> np.ndarray:
        return covariances(self.scales, self.rotations)

    def with_descriptors(self, descriptors: np.ndarray, labeled: np.ndarray) -> "GaussianScene":
        return GaussianScene(self.positions, self.scales, self.rotations, self.opacities,
                             self.colors, descriptors, labeled)


def validate_scene(scene: GaussianScene) -> list[str]:
    """Return a human-readable line per violated invariant (empty = valid)."""
    report = []

    def flag(mask, what):
        for i in np.flatnonzero(mask):
            report.append(f"gaussian {i}: {what}")

    flag(~np.isfinite(scene.positions).all(axis=1), "position not finite")
    flag(~(scene.scales > 0).all(axis=1), "scale must be > 0")
    qn = np.linalg.norm(scene.rotations.astype(np.float64), axis=1)
    flag(np.abs(qn - 1) > 1e-6, "rotation quaternion not unit norm")
    flag(~((scene.opacities >= 0) & (scene.opacities <= 1)), "opacity outside [0, 1]")
    flag(~((scene.colors >= 0) & (scene.colors <= 1)).all(axis=1), "color outside [0, 1]")
    if scene.descriptors is not None:
        if scene.descriptors.shape[0] != len(scene):
            report.append("descriptor count differs from gaussian count")
        else:
            dn = np.linalg.norm(scene.descriptors.astype(np.float64), axis=1)
            labeled = scene.labeled if scene.labeled is not None else np.ones(len(scene), bool)
            flag(labeled & (np.abs(dn - 1) > UNIT_TOL), "descriptor not unit normalized")
            flag(~labeled & (dn != 0), "unlabeled gaussian carries a non-zero descriptor")
    return report


@dataclass(frozen=True)
class MaskSet:
    """Per-view mask dictionary: label map (0 = null) plus one unit embedding per mask."""

    view_id: int
    label_map: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        lm = np.asarray(self.label_map)
        if lm.ndim != 2:
            raise ValueError("label_map must be 2-D")
        emb = np.asarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2:
            raise ValueError("embeddings must be a (K, D) matrix")
        object.__setattr__(self, "label_map", lm.astype(np.uint16))
        object.__setattr__(self, "embeddings", emb)
        if lm.size and int(lm.max()) > emb.shape[0]:
            raise ValueError(f"view {self.view_id}: label {int(lm.max())} exceeds mask count {emb.shape[0]}")
        norms = np.linalg.norm(emb.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1) > UNIT_TOL)
        if bad.size:
            raise ValueError(f"view {self.view_id}: embeddings {bad.tolist()} are not unit norm")

    @property
    def mask_count(self) -> int:
        return self.embeddings.shape[0]

    def mask(self, k: int) -> np.ndarray:
        return self.label_map == k


@dataclass(frozen=True)
class WarpField:
    """Dense warp from ``src_view`` into ``dst_view``.

    ``warp[0]`` / ``warp[1]`` hold the destination x / y (continuous pixel
    coordinates) for each source pixel; ``confidence`` lives on the source grid.
    """

    src_view: int
    dst_view: int
    warp: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.warp, dtype=np.float32)
        c = np.asarray(self.confidence, dtype=np.float32)
        if w.ndim != 3 or w.shape[0] != 2 or w.shape[1:] != c.shape:
            raise ValueError("warp must be (2, H, W) and confidence (H, W)")
        if not np.isfinite(w).all():
            raise ValueError("warp coordinates must be finite")
        if c.size and (c.min() < 0 or c.max() > 1):
            raise ValueError("confidence must lie in [0, 1]")
        object.__setattr__(self, "warp", w)
        object.__setattr__(self, "confidence", c)

    @property
    def shape(self) -> tuple[int, int]:
        return self.confidence.shape


@dataclass(frozen=True)
class ViewSet:
    cameras: dict[int, Camera]
    masks: dict[int, MaskSet]
    descriptor_dim: int
    colors: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def view_ids(self) -> list[int]:
        return sorted(self.cameras)


def _check_unit_interval(name, value):
    if not 0 <= value <= 1:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class ClusterConfig:
    tau_alpha: float = 0.6
    tau_iou: float = 0.5
    tau_box: float = 0.5
    s_min: int = 2
    v_min: int = 2
    neighbors_k: int = 2
    vis_threshold: float = 0.5

    def __post_init__(self):
        # thresholds above 1 are accepted and simply never pass
        for name in ("tau_alpha", "tau_iou", "tau_box"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        _check_unit_interval("vis_threshold", self.vis_threshold)
        if self.s_min < 1 or self.v_min < 1 or self.neighbors_k < 1:
            raise ValueError("s_min, v_min and neighbors_k must be >= 1")


@dataclass(frozen=True)
class RenderConfig:
    top_k: int = 10
    alpha_cutoff: float = 1.0 / 255.0
    sigma_cutoff: float = 3.0
    topk_mode: str = "weight"

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 < self.alpha_cutoff < 1:
            raise ValueError("alpha_cutoff must lie in (0, 1)")
        if not self.sigma_cutoff > 0:
            raise ValueError("sigma_cutoff must be > 0")
        if self.topk_mode not in ("weight", "depth"):
            raise ValueError("topk_mode must be 'weight' or 'depth'")


@dataclass(frozen=True)
class QueryConfig:
    tau_act: float = 0.85
    gamma: float = 0.5
    shortlist_size: int = 128

    def __post_init__(self):
        if not self.tau_act >= -1:
            raise ValueError("tau_act must be >= -1")
        _check_unit_interval("gamma", self.gamma)
        if self.shortlist_size < 1:
            raise ValueError("shortlist_size must be >= 1")
