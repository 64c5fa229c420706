"""Depth-based forward warping from a reference view into target views.

Images are warped by scatter (splat to the nearest integer pixel with a
z-buffer), noise by gather (each target pixel pulls from its nearest
reprojected source within a bounded receptive radius). The split matters:
image holes are masked and later inpainted, while noise needs controlled
duplication so its per-pixel marginals stay standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Camera, project_points, unproject_grid


class WarpError(ValueError):
    pass


@dataclass
class WarpResult:
    """image is zero where mask is zero; zbuffer is +inf exactly there."""

    image: np.ndarray    # (C, H, W) float32
    mask: np.ndarray     # (H, W) float32 in {0, 1}
    zbuffer: np.ndarray  # (H, W) float32, +inf where empty
    behind: int = 0      # source pixels dropped for landing behind the target


def _prepare(src, depth):
    src = np.asarray(src, dtype=np.float32)
    if src.ndim == 2:
        src = src[None]
    depth = np.asarray(depth, dtype=np.float64)
    if src.shape[1:] != depth.shape:
        raise WarpError(f"image {src.shape} and depth {depth.shape} disagree on H x W")
    valid = (depth > 0).reshape(-1)
    if not valid.any():
        raise WarpError("depth map has no valid (positive) pixels")
    return src, depth, valid


def _reproject(depth, valid, src_cam, dst_cam):
    """Continuous target-view coordinates of every valid source pixel."""
    world = unproject_grid(src_cam, depth)[valid]
    u, v, z = project_points(dst_cam, world)
    front = z > 1e-9
    return u, v, z, front, int((~front).sum())


def forward_warp(src, depth, src_cam: Camera, dst_cam: Camera) -> WarpResult:
    """Splat every valid source pixel into the target view.

    Nearest integer pixel, z-buffer keeps the smallest target depth; exact
    depth ties go to the lower source row-major index.
    """
    src, depth, valid = _prepare(src, depth)
    c, h, w = src.shape
    u, v, z, front, behind = _reproject(depth, valid, src_cam, dst_cam)
    src_idx = np.flatnonzero(valid)[front]
    u, v, z = u[front], v[front], z[front]

    ui = np.floor(u + 0.5).astype(np.int64)
    vi = np.floor(v + 0.5).astype(np.int64)
    inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    ui, vi, z, src_idx = ui[inside], vi[inside], z[inside], src_idx[inside]

    image = np.zeros((c, h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.float32)
    zbuf = np.full((h, w), np.inf, dtype=np.float32)
    if len(z):
        tgt = vi * w + ui
        order = np.lexsort((src_idx, z))  # primary z, secondary source index
        tgt_sorted = tgt[order]
        uniq, first = np.unique(tgt_sorted, return_index=True)
        win = order[first]
        flat = image.reshape(c, -1)
        flat[:, uniq] = src.reshape(c, -1)[:, src_idx[win]]
        mask.reshape(-1)[uniq] = 1.0
        zbuf.reshape(-1)[uniq] = z[win]
    return WarpResult(image, mask, zbuf, behind)


def noise_receptive_px(resolution: int, anchor_px: float = 4.0, anchor_res: int = 256) -> float:
    """Receptive radius for noise gathering, scaled linearly with resolution.

    Floored at 1px: below that no shifted grid could ever be gathered, which
    would silently disable noise warping at small resolutions.
    """
    return max(1.0, anchor_px * resolution / anchor_res)


def warp_noise(eps0, depth, src_cam: Camera, dst_cam: Camera, receptive_px: float) -> WarpResult:
    """Gather noise: target pixels pull from the nearest reprojected source.

    A target is filled only when the nearest source projection lies within
    `receptive_px` of it, and one source value feeds at most
    ceil(receptive_px)^2 targets (farther claims are dropped, left unfilled).
    Unfilled pixels are the caller's to complete with fresh noise.
    """
    if receptive_px < 1:
        raise WarpError(f"receptive_px must be >= 1, got {receptive_px}")
    eps0, depth, valid = _prepare(eps0, depth)
    c, h, w = eps0.shape
    u, v, z, front, behind = _reproject(depth, valid, src_cam, dst_cam)
    src_idx = np.flatnonzero(valid)[front]
    u, v, z = u[front], v[front], z[front]

    image = np.zeros((c, h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.float32)
    zbuf = np.full((h, w), np.inf, dtype=np.float32)
    if len(z) == 0:
        return WarpResult(image, mask, zbuf, behind)

    tree = cKDTree(np.stack([u, v], axis=1))
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    targets = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    dist, near = tree.query(targets, distance_upper_bound=receptive_px)
    hit = np.flatnonzero(near < len(z))
    if len(hit) == 0:
        return WarpResult(image, mask, zbuf, behind)
    chosen = near[hit]
    d = dist[hit]

    # per-source duplication cap: keep the closest claims, drop the rest
    cap = int(math.ceil(receptive_px)) ** 2
    order = np.lexsort((hit, d, chosen))
    cs = chosen[order]
    starts = np.zeros(len(cs), dtype=bool)
    starts[0] = True
    starts[1:] = cs[1:] != cs[:-1]
    start_pos = np.flatnonzero(starts)
    group = np.cumsum(starts) - 1
    rank = np.arange(len(cs)) - start_pos[group]
    keep = order[rank < cap]

    tgt = hit[keep]
    source = src_idx[chosen[keep]]
    image.reshape(c, -1)[:, tgt] = eps0.reshape(c, -1)[:, source]
    mask.reshape(-1)[tgt] = 1.0
    zbuf.reshape(-1)[tgt] = z[chosen[keep]]
    return WarpResult(image, mask, zbuf, behind)


def overlap_ratio(mask) -> float:
    """Mean of a binary validity mask."""
    mask = np.asarray(mask)
    if mask.size and not np.isin(mask, (0, 1)).all():
        raise WarpError("overlap_ratio expects a binary mask")
    return float(mask.mean())


def warp_edited(src, depth, src_cam: Camera, dst_cam: Camera, edit_mask=None) -> WarpResult:
    """forward_warp honoring an optional edit mask.

    Masked pixels get depth zero (invalid for warping). A fully masked
    reference yields an all-empty result rather than an error: total
    occlusion is a legal conditioning state the model must complete.
    """
    src = np.asarray(src, dtype=np.float32)
    if src.ndim == 2:
        src = src[None]
    depth = np.asarray(depth)
    if edit_mask is not None:
        depth = mask_reference(depth, edit_mask)
        src = mask_reference(src, edit_mask)
    if not (np.asarray(depth) > 0).any():
        c, h, w = src.shape
        return WarpResult(np.zeros((c, h, w), dtype=np.float32),
                          np.zeros((h, w), dtype=np.float32),
                          np.full((h, w), np.inf, dtype=np.float32))
    return forward_warp(src, depth, src_cam, dst_cam)


def mask_reference(image, edit_mask):
    """Zero out edit-masked pixels of an H x W (-trailing) array.

    Applied to a depth map this marks the region invalid for warping (depth
    zero); applied to an image it clears the same pixels. edit_mask is H x W
    with nonzero meaning "masked out".
    """
    image = np.asarray(image)
    edit = np.asarray(edit_mask) != 0
    if image.shape[-2:] != edit.shape:
        raise WarpError(f"edit mask {edit.shape} does not match image {image.shape}")
    return np.where(edit, 0, image).astype(image.dtype, copy=False)
