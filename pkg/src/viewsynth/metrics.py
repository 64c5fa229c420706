"""Fidelity and multi-view consistency metrics.

Consistency is scored with the symmetric epipolar distance of feature
matches between generated frame pairs under their ground-truth cameras: a
pair is consistent at pixel threshold tau when its aggregated SED is at most
2 tau^2 (one squared tau-pixel point-line distance per image). TSED(tau) is
the fraction of consistent pairs; the summary score averages TSED over a
fixed threshold ladder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Camera, GeometryError, fundamental_matrix, sed_many

DEFAULT_THRESHOLDS = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)


class MetricError(ValueError):
    pass


def psnr(a, b, mask=None) -> float:
    """10 log10(1/MSE) for [0,1] images; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    se = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask) != 0
        if mask.shape != a.shape[-2:]:
            raise MetricError(f"mask shape {mask.shape} does not match image {a.shape}")
        if not mask.any():
            raise MetricError("empty mask")
        se = se[..., mask]
    mse = se.mean()
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# keypoints


def _to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=0) if img.ndim == 3 else img


def harris_corners(gray, max_corners=64, k=0.06, rel_threshold=1e-5, border=6):
    """Corner pixels (u, v) by Harris response with 3x3 non-max suppression."""
    gy, gx = np.gradient(gray)
    sxx = ndimage.gaussian_filter(gx * gx, 1.0)
    syy = ndimage.gaussian_filter(gy * gy, 1.0)
    sxy = ndimage.gaussian_filter(gx * gy, 1.0)
    det = sxx * syy - sxy * sxy
    tr = sxx + syy
    resp = det - k * tr * tr
    peaks = (resp == ndimage.maximum_filter(resp, size=3)) & (resp > rel_threshold * resp.max())
    peaks[:border] = peaks[-border:] = False
    peaks[:, :border] = peaks[:, -border:] = False
    vs, us = np.nonzero(peaks)
    if len(us) > max_corners:
        order = np.argsort(resp[vs, us])[::-1][:max_corners]
        us, vs = us[order], vs[order]
    return np.stack([us, vs], axis=1) if len(us) else np.zeros((0, 2), dtype=int)


class _PatchGrid:
    """All normalized patches of one image, indexed by patch center."""

    def __init__(self, gray, half):
        from numpy.lib.stride_tricks import sliding_window_view

        self.half = half
        self.h, self.w = gray.shape
        win = sliding_window_view(gray, (2 * half + 1, 2 * half + 1))
        self.flat = win.reshape(win.shape[0], win.shape[1], -1)  # strided view
        n = self.flat.shape[-1]
        mean = self.flat.mean(-1)
        self.norm = np.sqrt(np.maximum((self.flat ** 2).sum(-1) - n * mean ** 2, 0.0))

    def patch(self, u, v):
        return self.flat[v - self.half, u - self.half]

    def best(self, patch_vec, u, v, search):
        """Highest-NCC center near (u, v), or None for textureless patches.

        The query patch is centered; sum(pa_c) = 0 makes the score against a
        raw patch equal the score against its centered version.
        """
        pa = patch_vec - patch_vec.mean()
        na = np.sqrt((pa * pa).sum())
        if na < 1e-9:
            return None
        half = self.half
        v0 = max(half, v - search) - half
        v1 = min(self.h - half - 1, v + search) - half
        u0 = max(half, u - search) - half
        u1 = min(self.w - half - 1, u + search) - half
        if v1 < v0 or u1 < u0:
            return None
        sub = self.flat[v0:v1 + 1, u0:u1 + 1]
        denom = self.norm[v0:v1 + 1, u0:u1 + 1] * na
        scores = np.where(denom > 1e-9, (sub @ pa) / np.maximum(denom, 1e-12), -2.0)
        idx = int(scores.argmax())
        vv, uu = divmod(idx, scores.shape[1])
        return float(scores[vv, uu]), (u0 + uu + half, v0 + vv + half)


def match_keypoints(a, b, patch=11, search=None, min_ncc=0.6, max_corners=64):
    """Harris corners in `a` matched into `b` by patch NCC, mutual-best only.

    Returns an (M, 4) array of (ua, va, ub, vb); fewer than 8 surviving
    matches means the pair should be treated as unmatchable.
    """
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise MetricError("images must share a size")
    half = patch // 2
    search = search if search is not None else max(6, ga.shape[0] // 3)
    corners = harris_corners(ga, max_corners=max_corners, border=half + 1)
    grid_a, grid_b = _PatchGrid(ga, half), _PatchGrid(gb, half)
    out = []
    for u, v in corners:
        fwd = grid_b.best(grid_a.patch(u, v), u, v, search)
        if fwd is None or fwd[0] < min_ncc:
            continue
        ub, vb = fwd[1]
        back = grid_a.best(grid_b.patch(ub, vb), ub, vb, search)
        if back is None or back[0] < min_ncc:
            continue
        ua, va = back[1]
        if abs(ua - u) <= 1 and abs(va - v) <= 1:  # mutual best
            out.append((u, v, ub, vb))
    return np.array(out, dtype=np.float64) if out else np.zeros((0, 4))


# ---------------------------------------------------------------------------
# TSED


@dataclass
class TsedReport:
    thresholds: list
    tsed: list                  # fraction of consistent pairs per threshold
    mtsed: float
    pair_match_counts: list     # matches per evaluated pair
    pair_sed: list              # aggregated SED per evaluated pair
    excluded_pairs: int = 0     # insufficient matches or degenerate baseline
    aggregate: str = "median"

    def to_dict(self):
        return {
            "thresholds": list(map(float, self.thresholds)),
            "tsed": list(map(float, self.tsed)),
            "mtsed": float(self.mtsed),
            "pair_match_counts": list(map(int, self.pair_match_counts)),
            "pair_sed": [float(x) for x in self.pair_sed],
            "excluded_pairs": int(self.excluded_pairs),
            "aggregate": self.aggregate,
        }


def sed_threshold(tau: float) -> float:
    """SED value equivalent to a tau-pixel offset in each image."""
    return 2.0 * tau * tau


def tsed(frames, pair_stride: int = 1, thresholds=DEFAULT_THRESHOLDS,
         aggregate: str = "median", min_matches: int = 8) -> TsedReport:
    """Thresholded symmetric epipolar distance over adjacent frame pairs.

    `frames` is a sequence of (image, Camera) pairs (or objects with .image
    and .camera). For each pair a fundamental matrix from the ground-truth
    cameras scores the keypoint matches; the per-pair SED aggregate (median
    by default, mean optionally) is compared against 2 tau^2.
    """
    if aggregate not in ("median", "mean"):
        raise MetricError(f"unknown aggregate {aggregate!r}")
    pairs = []
    items = [(f.image, f.camera) if hasattr(f, "image") else f for f in frames]
    if len(items) < 2:
        raise MetricError("need at least two frames")
    excluded = 0
    counts, pair_sed = [], []
    for i in range(0, len(items) - pair_stride, pair_stride):
        img_a, cam_a = items[i]
        img_b, cam_b = items[i + pair_stride]
        try:
            f = fundamental_matrix(cam_a, cam_b)
        except GeometryError:
            excluded += 1
            continue
        matches = match_keypoints(img_a, img_b)
        if len(matches) < min_matches:
            excluded += 1
            continue
        vals = sed_many(f, matches[:, :2], matches[:, 2:])
        agg = float(np.median(vals) if aggregate == "median" else np.mean(vals))
        counts.append(len(matches))
        pair_sed.append(agg)
        pairs.append(agg)
    if not pairs:
        fractions = [0.0 for _ in thresholds]
    else:
        arr = np.array(pairs)
        fractions = [float((arr <= sed_threshold(t)).mean()) for t in thresholds]
    assert all(b >= a - 1e-12 for a, b in zip(fractions, fractions[1:])), \
        "TSED must be nondecreasing in the threshold"
    return TsedReport(list(thresholds), fractions, float(np.mean(fractions)),
                      counts, pair_sed, excluded, aggregate)
