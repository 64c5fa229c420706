"""Pinhole cameras, rigid transforms, epipolar geometry.

Conventions, fixed once and used everywhere:
  - poses are stored world-from-camera: x_world = R @ x_cam + t
  - pixel coordinates are continuous with (0, 0) at the center of the
    top-left pixel; u runs along width, v along height
  - depth means camera-frame z, not ray length
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


def _check_rotation(r):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
        raise GeometryError("rotation is not orthonormal with determinant +1")
    return r


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; rotation/translation map camera coords to world coords."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def k_matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def with_pose(self, rotation, translation):
        return Camera(self.fx, self.fy, self.cx, self.cy, rotation, translation)

    def is_identity_pose(self, tol=1e-9):
        return (np.abs(self.rotation - np.eye(3)).max() < tol
                and np.abs(self.translation).max() < tol)


@dataclass(frozen=True)
class RigidTransform:
    """x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self . other)(x) = self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3))


def relative_pose(a: Camera, b: Camera) -> RigidTransform:
    """Transform taking camera-a coordinates to camera-b coordinates."""
    rb, ra = b.rotation, a.rotation
    return RigidTransform(rb.T @ ra, rb.T @ (a.translation - b.translation))


def project(cam: Camera, point) -> tuple[float, float, float]:
    """World point to (u, v, depth); raises if the point is behind the camera."""
    p = np.asarray(point, dtype=np.float64)
    x = cam.rotation.T @ (p - cam.translation)
    if x[2] <= 0:
        raise GeometryError("behind camera: point has nonpositive depth")
    return (cam.fx * x[0] / x[2] + cam.cx, cam.fy * x[1] / x[2] + cam.cy, x[2])


def unproject(cam: Camera, u: float, v: float, depth: float):
    """Pixel plus depth to a world-frame 3-vector (inverse of project)."""
    if depth <= 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    x = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return cam.rotation @ x + cam.translation


def project_points(cam: Camera, points):
    """Vectorized project: points (N,3) -> (u, v, z) arrays; z may be <= 0."""
    pts = np.asarray(points, dtype=np.float64)
    x = (pts - cam.translation) @ cam.rotation
    z = x[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * x[:, 0] / z + cam.cx
        v = cam.fy * x[:, 1] / z + cam.cy
    return u, v, z


def unproject_grid(cam: Camera, depth):
    """Unproject a full H x W depth map to world points (H*W, 3)."""
    h, w = depth.shape
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    x = (uu.reshape(-1) - cam.cx) / cam.fx * d
    y = (vv.reshape(-1) - cam.cy) / cam.fy * d
    pts = np.stack([x, y, d], axis=1)
    return pts @ cam.rotation.T + cam.translation


def skew(t):
    t = np.asarray(t, dtype=np.float64)
    return np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])


def fundamental_matrix(a: Camera, b: Camera) -> np.ndarray:
    """F with x_b^T F x_a = 0 for pixel correspondences (x_a in a, x_b in b)."""
    rel = relative_pose(a, b)
    if np.linalg.norm(rel.translation) <= 1e-9:
        raise GeometryError("degenerate baseline: camera centers coincide")
    e = skew(rel.translation) @ rel.rotation
    ka_inv = np.linalg.inv(a.k_matrix)
    kb_inv = np.linalg.inv(b.k_matrix)
    f = kb_inv.T @ e @ ka_inv
    return f / np.abs(f).max()


def essential_matrix(a: Camera, b: Camera) -> np.ndarray:
    rel = relative_pose(a, b)
    if np.linalg.norm(rel.translation) <= 1e-9:
        raise GeometryError("degenerate baseline: camera centers coincide")
    e = skew(rel.translation) @ rel.rotation
    return e / np.linalg.norm(e)


def _line_dist_sq(line, pt):
    n = line[0] ** 2 + line[1] ** 2
    if n < 1e-24:
        return np.inf
    r = line[0] * pt[0] + line[1] * pt[1] + line[2]
    return r * r / n


def sed(f: np.ndarray, x, x_prime) -> float:
    """Symmetric epipolar distance in squared pixels.

    d(x', F x)^2 + d(x, F^T x')^2 with point-to-line distances; returns inf
    when an epipolar line degenerates to a zero normal.
    """
    xa = np.array([x[0], x[1], 1.0])
    xb = np.array([x_prime[0], x_prime[1], 1.0])
    return float(_line_dist_sq(f @ xa, xb) + _line_dist_sq(f.T @ xb, xa))


def sed_many(f: np.ndarray, xs, xps) -> np.ndarray:
    """Vectorized sed over matched point arrays (N,2) and (N,2)."""
    xs = np.asarray(xs, dtype=np.float64)
    xps = np.asarray(xps, dtype=np.float64)
    ha = np.concatenate([xs, np.ones((len(xs), 1))], axis=1)
    hb = np.concatenate([xps, np.ones((len(xps), 1))], axis=1)
    la = ha @ f.T  # lines in image b
    lb = hb @ f    # lines in image a
    with np.errstate(divide="ignore", invalid="ignore"):
        da = (la * hb).sum(axis=1) ** 2 / (la[:, 0] ** 2 + la[:, 1] ** 2)
        db = (lb * ha).sum(axis=1) ** 2 / (lb[:, 0] ** 2 + lb[:, 1] ** 2)
    out = da + db
    out[~np.isfinite(out)] = np.inf
    return out


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Cameras expressed relative to the first (reference) camera.

    `anchor`, when present, is the reference camera's world pose, kept so a
    procedural scene can be re-rendered; all consumers of the trajectory
    itself only ever see reference-frame poses.
    """

    cameras: list[Camera]
    anchor: Camera | None = None

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise GeometryError(f"trajectory needs at least 2 cameras, got {len(self.cameras)}")
        if not self.cameras[0].is_identity_pose(tol=1e-9):
            raise GeometryError("first trajectory camera must be the identity pose")

    def __len__(self):
        return len(self.cameras)

    def world_camera(self, index: int) -> Camera:
        """World-frame pose of camera `index` (requires an anchor)."""
        if self.anchor is None:
            raise GeometryError("trajectory has no world anchor")
        cam = self.cameras[index]
        # cam pose maps reference-frame -> itself as world_from_camera in the
        # reference frame; lift through the anchor
        return self.anchor.with_pose(self.anchor.rotation @ cam.rotation,
                                     self.anchor.rotation @ cam.translation + self.anchor.translation)


def trajectory_to_json(traj: Trajectory) -> str:
    cams = [{
        "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
        "R": [float(x) for x in c.rotation.reshape(-1)],
        "t": [float(x) for x in c.translation],
    } for c in traj.cameras]
    return json.dumps({"convention": "world_from_camera", "cameras": cams}, indent=1)


def trajectory_from_json(text: str) -> Trajectory:
    doc = json.loads(text)
    if doc.get("convention") != "world_from_camera":
        raise GeometryError(f"unsupported pose convention {doc.get('convention')!r}")
    cams = [Camera(c["fx"], c["fy"], c["cx"], c["cy"],
                   np.array(c["R"], dtype=np.float64).reshape(3, 3),
                   np.array(c["t"], dtype=np.float64))
            for c in doc["cameras"]]
    return Trajectory(cams)
