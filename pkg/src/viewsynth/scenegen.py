"""Procedural indoor scenes and an analytic raycast renderer.

Rooms are closed axis-aligned boxes with smoothly textured walls plus a
handful of flat-colored axis-aligned boxes as furniture proxies. Exact
ray/slab intersections make the rendered depth a trustworthy oracle for the
warping and epipolar machinery. Wall texture is a low-amplitude two-frequency
plaid: smooth enough that nearest-neighbor warps reproduce colors, busy
enough that a corner detector finds features everywhere.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, GeometryError, RigidTransform, Trajectory, relative_pose
from .warp import forward_warp, overlap_ratio

ROOM_LO = np.array([0.0, 0.0, 0.0])
ROOM_HI = np.array([6.0, 3.0, 6.0])
FOV_FOCAL = 0.866  # focal = FOV_FOCAL * resolution, a 60 degree field of view

# plaid parameters: amplitude/period tuned so a half-pixel nearest-neighbor
# shift moves wall color by well under 0.1 at any in-room viewing distance.
# the field is a function of the 3-d hit point, so color stays continuous
# across wall junctions (only box silhouettes break it, and those are depth
# discontinuities anyway)
_TEX_AMP = 0.06
_TEX_PERIOD = 1.4


@dataclass(frozen=True)
class SceneBox:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray  # (3,) in [0,1]


@dataclass(frozen=True)
class Scene:
    seed: int
    boxes: tuple
    wall_base: np.ndarray     # (3,) base wall color
    tex_k: np.ndarray         # (3, 3) plaid wavevectors
    tex_phase: np.ndarray     # (3,) plaid phases
    tex_weights: np.ndarray   # (3,) per-channel texture weights
    room_lo: np.ndarray = field(default_factory=lambda: ROOM_LO.copy())
    room_hi: np.ndarray = field(default_factory=lambda: ROOM_HI.copy())


@dataclass(frozen=True)
class DepthNoiseModel:
    """Multiplicative per-pixel noise plus a global affine error."""

    sigma: float = 0.0
    scale: float = 1.0
    offset: float = 0.0


@dataclass
class PosedFrame:
    image: np.ndarray   # (3, H, W) float32 in [0, 1]
    depth: np.ndarray   # (H, W) float32, camera-frame z
    camera: Camera


def _palette(n, rng):
    """n distinct saturated colors via a golden-ratio hue walk."""
    h0 = rng.random()
    cols = []
    for i in range(n):
        h = (h0 + i * 0.61803398875) % 1.0
        cols.append(colorsys.hsv_to_rgb(h, 0.65, 0.85))
    return np.array(cols)


def generate_scene(seed: int, n_boxes_range=(3, 10)) -> Scene:
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    n = int(rng.integers(n_boxes_range[0], n_boxes_range[1] + 1))
    colors = _palette(n + 1, rng)
    boxes = []
    for i in range(n):
        size = rng.uniform(0.35, 1.1, 3)
        lo = np.array([
            rng.uniform(ROOM_LO[0] + 0.2, ROOM_HI[0] - 0.2 - size[0]),
            0.0,
            rng.uniform(ROOM_LO[2] + 0.2, ROOM_HI[2] - 0.2 - size[2]),
        ])
        if rng.random() < 0.25:
            lo[1] = rng.uniform(0.8, ROOM_HI[1] - size[1] - 0.1)
        boxes.append(SceneBox(lo, lo + size, colors[i]))
    dirs = rng.standard_normal((3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return Scene(seed=int(seed), boxes=tuple(boxes),
                 wall_base=0.45 + 0.3 * colors[n],
                 tex_k=dirs * (2 * np.pi / _TEX_PERIOD),
                 tex_phase=rng.uniform(0, 2 * np.pi, 3),
                 tex_weights=rng.uniform(0.6, 1.0, 3))


def default_camera(resolution: int) -> Camera:
    c = (resolution - 1) / 2
    return Camera(FOV_FOCAL * resolution, FOV_FOCAL * resolution, c, c)


def _inside_any_box(scene, p, margin=0.05):
    for b in scene.boxes:
        if np.all(p > b.lo - margin) and np.all(p < b.hi + margin):
            return True
    return False


def camera_position_ok(scene: Scene, p, wall_margin=0.3) -> bool:
    inside_room = np.all(p > scene.room_lo + wall_margin) and np.all(p < scene.room_hi - wall_margin)
    return bool(inside_room and not _inside_any_box(scene, p))


def _wall_texture(scene, pts):
    """Smooth two-frequency plaid evaluated at 3-d hit points."""
    s1 = np.sin(pts @ scene.tex_k[0] + scene.tex_phase[0])
    s2 = np.sin(pts @ scene.tex_k[1] + scene.tex_phase[1])
    s3 = np.sin(pts @ (scene.tex_k[2] * 1.37) + scene.tex_phase[2])
    tex = s1 * s2 + 0.5 * s3
    return scene.wall_base[None, :] + _TEX_AMP * tex[:, None] * scene.tex_weights[None, :]


def render(scene: Scene, cam: Camera, resolution: int) -> PosedFrame:
    """Raycast the scene: nearest box hit, else the room wall behind it."""
    if not camera_position_ok(scene, cam.translation, wall_margin=1e-6):
        raise GeometryError("camera inside geometry")
    h = w = int(resolution)
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    dirs_cam = np.stack([(uu.reshape(-1) - cam.cx) / cam.fx,
                         (vv.reshape(-1) - cam.cy) / cam.fy,
                         np.ones(h * w)], axis=1)
    dirs = dirs_cam @ cam.rotation.T          # ray t equals camera-frame z
    origin = cam.translation

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    best_t = np.full(h * w, np.inf)
    color = np.zeros((h * w, 3))

    for box in scene.boxes:
        t1 = (box.lo - origin) * inv
        t2 = (box.hi - origin) * inv
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        hit = (tmax >= tmin) & (tmin > 1e-9) & (tmin < best_t)
        best_t[hit] = tmin[hit]
        color[hit] = box.color

    # room walls: the camera is inside, so take the exit intersection
    t1 = (scene.room_lo - origin) * inv
    t2 = (scene.room_hi - origin) * inv
    exit_t = np.maximum(t1, t2).min(axis=1)
    wall = exit_t < best_t
    if wall.any():
        pts = origin + exit_t[wall, None] * dirs[wall]
        color[wall] = _wall_texture(scene, pts)
        best_t[wall] = exit_t[wall]

    img = np.clip(color, 0.0, 1.0).T.reshape(3, h, w).astype(np.float32)
    depth = best_t.reshape(h, w).astype(np.float32)
    return PosedFrame(img, depth, cam)


# ---------------------------------------------------------------------------
# trajectories


def _rot_y(rad):
    c, s = np.cos(rad), np.sin(rad)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _look_rotation(forward, up=(0, 1, 0)):
    """world_from_camera rotation with +z along `forward`, v axis downward."""
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    n = np.linalg.norm(x)
    if n < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / n
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _base_camera(scene, rng, resolution):
    intr = default_camera(resolution)
    for _ in range(100):
        p = np.array([rng.uniform(scene.room_lo[0] + 0.8, scene.room_hi[0] - 0.8),
                      rng.uniform(1.0, 2.0),
                      rng.uniform(scene.room_lo[2] + 0.8, scene.room_hi[2] - 0.8)])
        if not camera_position_ok(scene, p):
            continue
        yaw = rng.uniform(0, 2 * np.pi)
        fwd = np.array([np.sin(yaw), rng.uniform(-0.08, 0.08), np.cos(yaw)])
        return intr.with_pose(_look_rotation(fwd), p)
    raise GeometryError("cannot place a collision-free reference camera")


def _world_path(base, kind, n, rng, step, sweep_deg):
    fwd = base.rotation[:, 2]
    right = base.rotation[:, 0]
    cams = []
    if kind == "dolly":
        for i in range(n):
            cams.append(base.with_pose(base.rotation, base.translation + fwd * step * i))
    elif kind == "orbit":
        radius = 1.5
        pivot = base.translation + fwd * radius
        for i in range(n):
            ang = np.deg2rad(sweep_deg) * i / max(n - 1, 1)
            r = _rot_y(ang)
            p = pivot + r @ (base.translation - pivot)
            cams.append(base.with_pose(r @ base.rotation, p))
    elif kind == "scan":
        for i in range(n):
            frac = i / max(n - 1, 1)
            ang = np.deg2rad(sweep_deg) * frac
            p = base.translation + right * step * i
            cams.append(base.with_pose(_rot_y(ang) @ base.rotation, p))
    elif kind == "u_turn":
        half = max(n // 2, 1)
        for i in range(n):
            if i < half:
                p = base.translation + fwd * step * i
                r = base.rotation
            else:
                frac = (i - half + 1) / max(n - half, 1)
                r = _rot_y(np.deg2rad(180.0) * frac) @ base.rotation
                p = base.translation + fwd * step * (half - 1)
            cams.append(base.with_pose(r, p))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return cams


def generate_trajectory(scene: Scene, kind: str, n: int, seed: int, *,
                        resolution: int = 32, step: float = 0.15,
                        sweep_deg: float = 40.0, max_tries: int = 60) -> Trajectory:
    """N collision-free cameras relative to the first one.

    The returned trajectory stores reference-frame poses (first camera is the
    identity) plus the reference's world pose as `anchor` for re-rendering.
    u_turn paths are re-drawn until the final view's warp overlap with the
    reference is below 0.2.
    """
    if n < 2:
        raise GeometryError(f"trajectory needs n >= 2, got {n}")
    for attempt in range(max_tries):
        rng = np.random.default_rng([int(seed), attempt, 0x7247])
        try:
            base = _base_camera(scene, rng, resolution)
        except GeometryError:
            continue
        cams = _world_path(base, kind, n, rng, step, sweep_deg)
        if not all(camera_position_ok(scene, c.translation) for c in cams):
            continue
        rel = [cams[0].with_pose(*_rel_tuple(cams[0], c)) for c in cams]
        traj = Trajectory(rel, anchor=cams[0])
        if kind == "u_turn" and _reference_overlap(scene, traj, resolution, -1) >= 0.2:
            continue
        return traj
    raise GeometryError(f"cannot place a collision-free {kind} path after {max_tries} tries")


def _rel_tuple(ref, cam):
    rel = relative_pose(cam, ref)  # pose of cam in the reference frame
    return rel.rotation, rel.translation


def _reference_overlap(scene, traj, resolution, index):
    ref = render(scene, traj.world_camera(0), resolution)
    res = forward_warp(ref.image, ref.depth, traj.cameras[0], traj.cameras[index])
    return overlap_ratio(res.mask)


def render_sequence(scene: Scene, traj: Trajectory, resolution: int) -> list[PosedFrame]:
    """Render every trajectory camera; frames carry reference-frame poses."""
    frames = []
    for i, rel_cam in enumerate(traj.cameras):
        f = render(scene, traj.world_camera(i), resolution)
        frames.append(PosedFrame(f.image, f.depth, rel_cam))
    return frames


def corrupt_depth(depth, model: DepthNoiseModel, seed: int):
    """depth' = scale * depth * (1 + eta) + offset, eta ~ N(0, sigma^2), kept positive."""
    depth = np.asarray(depth, dtype=np.float32)
    if (depth <= 0).any():
        raise ValueError("corrupt_depth expects strictly positive depth")
    rng = np.random.default_rng([int(seed), 0xDE97])
    eta = rng.standard_normal(depth.shape).astype(np.float32) * model.sigma
    out = model.scale * depth * (1.0 + eta) + model.offset
    return np.maximum(out, 1e-6)
