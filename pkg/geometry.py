"""Pinhole cameras, depth unprojection, world-space encoding and 3D centroids.

Camera frame convention: x right, y down, z forward. World frame is z-up.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

import numerics as nx
from errors import CameraError, ProjectionError, ShapeError

CENTROID_EPSILON = 1e-6


@dataclass
class Camera:
    """Intrinsics plus the world-from-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int = 32
    height: int = 32

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        ortho = np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3)))
        det = np.linalg.det(self.rotation)
        if ortho >= 1e-6 or abs(det - 1.0) >= 1e-6:
            raise CameraError(
                f"Rotation is not a proper rotation (orthonormality error {ortho:.2e}, det {det:.6f})"
            )

    @classmethod
    def look_at(cls, eye, target, fx: float, fy: float, width: int, height: int,
                up=(0.0, 0.0, 1.0)) -> "Camera":
        """Camera at `eye` looking at `target` with the principal point at the image center."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise CameraError("Camera eye and target coincide")
        forward = forward / norm
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise CameraError("Viewing direction is parallel to the up vector")
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=1)
        return cls(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0, rotation=rotation,
                   translation=eye, width=width, height=height)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera_frame(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def ray_directions(self) -> np.ndarray:
        """World-space ray per pixel, scaled so the ray parameter equals depth. Shape (H, W, 3)."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], axis=-1)
        return cam @ self.rotation.T

    def to_dict(self) -> Dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Camera":
        return cls(**data)


@dataclass
class DepthMap:
    values: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values) & (self.values > 0)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class PointMap:
    points: np.ndarray  # (H, W, 3) world meters, zero where invalid
    valid: np.ndarray   # (H, W) bool

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]


def unproject(camera: Camera, depth: DepthMap) -> PointMap:
    """P = R (d K^-1 [u, v, 1]) + t for every valid pixel."""
    if depth.values.shape != (camera.height, camera.width):
        raise ShapeError(
            f"Depth map {depth.values.shape} does not match image plane "
            f"({camera.height}, {camera.width})"
        )
    valid = depth.valid
    d = np.where(valid, depth.values, 0.0).astype(np.float64)
    points = camera.ray_directions() * d[..., None] + camera.translation
    points = np.where(valid[..., None], points, 0.0)
    return PointMap(points=points, valid=valid)


def unproject_pixel(camera: Camera, u: float, v: float, depth: float) -> np.ndarray:
    cam = np.array([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth])
    return camera.rotation @ cam + camera.translation


def project(camera: Camera, point) -> Tuple[float, float, float]:
    """World point to (u, v, depth)."""
    x, y, z = camera.to_camera_frame(point)
    if z <= 0:
        raise ProjectionError(f"Point {np.asarray(point).tolist()} is behind the camera (z={z:.4f})")
    return camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy, z


def project_points(camera: Camera, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (uvd of shape (n, 3), in_front mask)."""
    cam = camera.to_camera_frame(points)
    z = cam[:, 2]
    in_front = z > 0
    safe = np.where(in_front, z, 1.0)
    u = camera.fx * cam[:, 0] / safe + camera.cx
    v = camera.fy * cam[:, 1] / safe + camera.cy
    return np.stack([u, v, z], axis=-1), in_front


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of a (n, 3) and b (m, 3)."""
    diff = np.asarray(a, dtype=np.float64)[:, None, :] - np.asarray(b, dtype=np.float64)[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def mask_weighted_centroid(mask_prob: np.ndarray, points: PointMap, epsilon: float = CENTROID_EPSILON,
                           return_weight: bool = False):
    """c = sum(M P) / (sum(M) + eps) over valid pixels.

    An all-zero mask gives the zero vector; pass return_weight=True to see the
    weight sum and decide whether the centroid is trustworthy.
    """
    if mask_prob.shape != points.valid.shape:
        raise ShapeError(f"Mask {mask_prob.shape} does not match point map {points.valid.shape}")
    weights = np.where(points.valid, mask_prob, 0.0).astype(np.float64)
    total = float(np.sum(weights))
    centroid = np.tensordot(weights, points.points, axes=([0, 1], [0, 1])) / (total + epsilon)
    if return_weight:
        return centroid, total
    return centroid


def camera_relative_phrase(camera: Camera, point) -> str:
    """Describe a world point in the camera's frame, e.g. "1.2m ahead, 0.3m left, 0.1m up"."""
    x, y, z = camera.to_camera_frame(point)
    parts = [
        f"{abs(z):.1f}m {'ahead' if z >= 0 else 'behind'}",
        f"{abs(x):.1f}m {'right' if x >= 0 else 'left'}",
        f"{abs(y):.1f}m {'down' if y >= 0 else 'up'}",
    ]
    return ", ".join(parts)


# ---------------------------------------------------------------------------
# World-space positional encoding
# ---------------------------------------------------------------------------

def sinusoid_encoding(points: np.ndarray, num_frequencies: int, scale: float) -> np.ndarray:
    """gamma(p / s): the normalized point followed by sin/cos blocks per frequency."""
    p = np.asarray(points, dtype=np.float64) / scale
    blocks = [p]
    for i in range(num_frequencies):
        angle = (2.0 ** i) * np.pi * p
        blocks.append(np.sin(angle))
        blocks.append(np.cos(angle))
    return np.concatenate(blocks, axis=-1)


@dataclass
class WorldPE:
    """gamma(p / s) followed by a two-layer GELU perceptron to the model width."""

    num_frequencies: int = 10
    scale: float = 10.0
    dim: int = 64
    params: Dict[str, nx.DualTensor] = field(default_factory=dict)

    @property
    def raw_dim(self) -> int:
        return 3 + 2 * 3 * self.num_frequencies

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, num_frequencies: int = 10,
               scale: float = 10.0, prefix: str = "pe") -> "WorldPE":
        pe = cls(num_frequencies=num_frequencies, scale=scale, dim=dim)
        raw = pe.raw_dim
        pe.params = {
            "w1": nx.parameter(nx.dense_init(rng, raw, dim), f"{prefix}.w1"),
            "b1": nx.parameter(np.zeros(dim), f"{prefix}.b1"),
            "w2": nx.parameter(nx.dense_init(rng, dim, dim), f"{prefix}.w2"),
            "b2": nx.parameter(np.zeros(dim), f"{prefix}.b2"),
        }
        return pe

    def raw(self, points: np.ndarray) -> np.ndarray:
        return sinusoid_encoding(points, self.num_frequencies, self.scale)

    def __call__(self, points: np.ndarray, valid: Optional[np.ndarray] = None) -> nx.DualTensor:
        """Embed (n, 3) world points; rows flagged invalid get a zero embedding."""
        p = self.params
        hidden = nx.gelu(nx.matmul(self.raw(points), p["w1"]) + p["b1"])
        out = nx.matmul(hidden, p["w2"]) + p["b2"]
        if valid is not None:
            out = out * np.asarray(valid, dtype=np.float64)[..., None]
        return out


def encode_world_pe(pe: WorldPE, points: PointMap) -> np.ndarray:
    """Per-pixel D-vector embeddings for a point map, shape (H, W, D)."""
    flat = points.points.reshape(-1, 3)
    with nx.no_grad():
        out = pe(flat, points.valid.reshape(-1))
    return out.value.reshape(points.height, points.width, pe.dim)
