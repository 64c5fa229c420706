"""Variance-preserving diffusion: schedule, structured noise, DDIM sampling.

The noising operator is sqrt(a_t) z + sqrt(1 - a_t) xi with cumulative signal
coefficients a_t; its algebraic inverse recovers z given the noise. Initial
sampler noise is drawn from a structured distribution: one shared noise image
warped into every target view, holes filled with fresh independent noise, so
overlapping views start from correlated noise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tc
from .geometry import Camera
from .warp import forward_warp, noise_receptive_px, overlap_ratio, warp_edited, warp_noise


class DiffusionError(ValueError):
    pass


def derive_seed(seed: int, *tags: int) -> int:
    """Stable child seed for namespacing independent random streams."""
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


@dataclass(frozen=True)
class DiffusionSchedule:
    kind: str
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] = 1, strictly decreasing

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def __post_init__(self):
        ab = self.alpha_bar
        if ab[0] != 1.0:
            raise DiffusionError("alpha_bar[0] must be 1")
        if (np.diff(ab) >= 0).any() or (ab <= 0).any() or (ab > 1).any():
            raise DiffusionError("alpha_bar must lie in (0,1] and strictly decrease")


def make_schedule(T: int, kind: str = "linear_beta") -> DiffusionSchedule:
    """Cumulative signal schedule; linear_beta sweeps beta over 1e-4..2e-2."""
    if T < 1:
        raise DiffusionError(f"T must be >= 1, got {T}")
    if kind == "linear_beta":
        betas = np.linspace(1e-4, 2e-2, T)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "cosine":
        s = 0.008
        t = np.arange(T + 1) / T
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        ab = np.concatenate([[1.0], np.maximum(ab[1:], 1e-8)])
        ab = np.minimum.accumulate(ab)
        eps = np.finfo(np.float64).eps
        for i in range(1, len(ab)):  # enforce strict decrease after clamping
            if ab[i] >= ab[i - 1]:
                ab[i] = ab[i - 1] * (1 - eps)
    else:
        raise DiffusionError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(kind, ab)


# ---------------------------------------------------------------------------
# conditioning


@dataclass
class Conditioning:
    """Everything the denoiser is conditioned on, in raw form.

    The semantic pieces (reference image, per-view pose vectors) are embedded
    by the model itself since those embeddings are learned. `warped`/`masks`
    form the per-view warped-reference condition; `ref_depth` is the depth
    actually used for warping (already corrupted/edited if applicable).
    """

    reference: np.ndarray           # (3, H, W)
    ref_depth: np.ndarray           # (H, W)
    cameras: list                   # N+1 cameras, [0] is the reference (identity)
    warped: np.ndarray              # (N, 3, H, W)
    masks: np.ndarray               # (N, H, W), binary
    pose_vecs: np.ndarray           # (N, 12) flattened rotation + translation
    edit_mask: np.ndarray | None = None

    @property
    def n_views(self) -> int:
        return len(self.cameras) - 1

    def __post_init__(self):
        n = self.n_views
        if not (len(self.warped) == len(self.masks) == len(self.pose_vecs) == n):
            raise DiffusionError("conditioning arrays disagree on the number of views")
        if self.masks.size and not np.isin(self.masks, (0, 1)).all():
            raise DiffusionError("warp masks must be binary")


def pose_vector(cam: Camera) -> np.ndarray:
    return np.concatenate([cam.rotation.reshape(-1), cam.translation]).astype(np.float32)


def build_conditioning(ref_image, ref_depth, cameras, *, edit_mask=None,
                       no_warp=False, no_pose=False) -> Conditioning:
    """Warp the reference into each target view and pack pose vectors.

    cameras[0] must be the reference; ablations replace the warped condition
    or the pose vectors with zeros while keeping shapes intact.
    """
    ref_image = np.asarray(ref_image, dtype=np.float32)
    ref_depth = np.asarray(ref_depth, dtype=np.float32)
    if edit_mask is not None:
        from .warp import mask_reference
        ref_depth = mask_reference(ref_depth, edit_mask)
        ref_image = mask_reference(ref_image, edit_mask)
    n = len(cameras) - 1
    h, w = ref_depth.shape
    warped = np.zeros((n, 3, h, w), dtype=np.float32)
    masks = np.zeros((n, h, w), dtype=np.float32)
    poses = np.zeros((n, 12), dtype=np.float32)
    for i in range(n):
        if not no_warp:
            res = warp_edited(ref_image, ref_depth, cameras[0], cameras[i + 1])
            warped[i] = res.image
            masks[i] = res.mask
        if not no_pose:
            poses[i] = pose_vector(cameras[i + 1])
    return Conditioning(ref_image, ref_depth, list(cameras), warped, masks, poses,
                        edit_mask=None if edit_mask is None else np.asarray(edit_mask))


# ---------------------------------------------------------------------------
# structured noise


@dataclass
class NoiseBundle:
    xi: np.ndarray     # (N, C, H, W) per-view noise
    masks: np.ndarray  # (N, H, W) where xi equals the warped shared noise
    eps0: np.ndarray   # (C, H, W) the shared reference noise


def sample_structured_noise(cond: Conditioning, seed: int, *, structured=True,
                            receptive_px: float | None = None, channels=3) -> NoiseBundle:
    """Per-view noise: warped shared noise where the warp reaches, fresh
    independent noise elsewhere. Every pixel is marginally standard normal."""
    h, w = cond.ref_depth.shape
    n = cond.n_views
    rng = np.random.default_rng([int(seed), 0x5EED])
    eps0 = rng.standard_normal((channels, h, w)).astype(np.float32)
    r = noise_receptive_px(max(h, w)) if receptive_px is None else receptive_px
    xi = np.empty((n, channels, h, w), dtype=np.float32)
    masks = np.zeros((n, h, w), dtype=np.float32)
    depth_ok = (cond.ref_depth > 0).any()
    for i in range(n):
        if structured and depth_ok:
            res = warp_noise(eps0, cond.ref_depth, cond.cameras[0], cond.cameras[i + 1], r)
            masks[i] = res.mask
            warped = res.image
        else:
            warped = 0.0
        fresh = rng.standard_normal((channels, h, w)).astype(np.float32)
        m = masks[i][None]
        xi[i] = m * warped + (1.0 - m) * fresh
    return NoiseBundle(xi, masks, eps0)


# ---------------------------------------------------------------------------
# noising algebra


def _check_t(t, sched):
    if not (1 <= t <= sched.T):
        raise DiffusionError(f"timestep {t} outside [1, {sched.T}]")


def perturb(z, xi, t: int, sched: DiffusionSchedule):
    """sqrt(a_t) z + sqrt(1 - a_t) xi."""
    _check_t(t, sched)
    a = sched.alpha_bar[t]
    z = np.asarray(z)
    xi = np.asarray(xi)
    if z.shape != xi.shape:
        raise DiffusionError(f"latent {z.shape} and noise {xi.shape} shapes differ")
    return (np.sqrt(a) * z + np.sqrt(1.0 - a) * xi).astype(z.dtype, copy=False)


def recover(z_t, eps, t: int, sched: DiffusionSchedule):
    """(z_t - sqrt(1 - a_t) eps) / sqrt(a_t), the inverse of perturb."""
    _check_t(t, sched)
    a = sched.alpha_bar[t]
    z_t = np.asarray(z_t)
    return ((z_t - np.sqrt(1.0 - a) * np.asarray(eps)) / np.sqrt(a)).astype(z_t.dtype, copy=False)


# ---------------------------------------------------------------------------
# training and sampling


def training_loss(model, views, cond: Conditioning, sched: DiffusionSchedule,
                  seed: int, *, structured=True):
    """Noise-prediction MSE on one posed sequence; returns (loss, grads, t).

    Draws t uniform in [1, T] and noise from the structured distribution,
    perturbs the clean views, and backprops the mean squared prediction
    error through every model parameter (control branch included).
    """
    views = np.asarray(views, dtype=np.float32)
    if views.shape[0] != cond.n_views:
        raise DiffusionError(f"batch has {views.shape[0]} views, conditioning {cond.n_views}")
    rng = np.random.default_rng([int(seed), 0x10AD])
    t = int(rng.integers(1, sched.T + 1))
    bundle = sample_structured_noise(cond, int(rng.integers(2 ** 31)), structured=structured)
    z_t = perturb(views, bundle.xi, t, sched)
    pred = model.forward(z_t, cond, t)
    diff = tc.sub(pred, tc.constant(bundle.xi))
    loss = tc.mean_all(tc.mul(diff, diff))
    for p in model.params.values():
        p.grad = None
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for k, p in model.params.items()}
    return float(loss.data), grads, t


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Evenly spaced timesteps from T down to 1, inclusive on both ends."""
    if num_steps < 1 or num_steps > T:
        raise DiffusionError(f"num_steps must be in [1, {T}], got {num_steps}")
    return np.unique(np.round(np.linspace(T, 1, num_steps)).astype(int))[::-1]


def ddim_sample(model, cond: Conditioning, sched: DiffusionSchedule,
                num_steps: int, seed: int, *, structured=True, xi_init=None):
    """Deterministic sampling: start at structured noise, iterate
    z_prev = sqrt(a_prev) (z recovered at t) + sqrt(1 - a_prev) eps_theta
    over a strided timestep subset ending at t = 0 where a_0 = 1."""
    ts = ddim_timesteps(sched.T, num_steps)
    if xi_init is not None:
        z = np.asarray(xi_init, dtype=np.float32).copy()
    else:
        z = sample_structured_noise(cond, seed, structured=structured).xi.copy()
    for t, t_prev in zip(ts, list(ts[1:]) + [0]):
        eps = model.predict(z, cond, int(t))
        z0 = recover(z, eps, int(t), sched)
        a_prev = sched.alpha_bar[t_prev]  # alpha_bar[0] = 1 closes the loop
        z = (np.sqrt(a_prev) * z0 + np.sqrt(1.0 - a_prev) * eps).astype(np.float32)
    return z


def _depth_proxies(cond: Conditioning, renderer_depths=None):
    """Per-view depth estimates: renderer depth when given (evaluation),
    otherwise the reference-warp z-buffer with holes marked invalid."""
    if renderer_depths is not None:
        return [np.asarray(d, dtype=np.float32) for d in renderer_depths]
    proxies = []
    for i in range(cond.n_views):
        res = forward_warp(cond.reference, cond.ref_depth, cond.cameras[0], cond.cameras[i + 1]) \
            if (cond.ref_depth > 0).any() else None
        if res is None:
            proxies.append(np.zeros_like(cond.ref_depth))
        else:
            z = res.zbuffer.copy()
            z[~np.isfinite(z)] = 0.0
            proxies.append(z)
    return proxies


def refine_pass(model, generated, cond: Conditioning, sched: DiffusionSchedule,
                num_steps: int, seed: int, *, overlap_threshold: float = 0.20,
                structured=True, renderer_depths=None):
    """Re-sample views whose reference-warp overlap is below the threshold,
    conditioning them on a warp of the closest generated view instead.

    Closest means maximum warp overlap into the low-coverage view; ties go to
    the smaller frame index. Views above the threshold keep their original
    warped-reference condition. Returns (views, metadata); when nothing falls
    below the threshold the first-pass views are returned unchanged.
    """
    generated = np.asarray(generated, dtype=np.float32)
    n = cond.n_views
    overlaps = [float(cond.masks[i].mean()) for i in range(n)]
    below = [i for i, ov in enumerate(overlaps) if ov < overlap_threshold]
    meta = {"passes": 1, "overlaps": overlaps, "refined": below, "sources": {},
            "overlap_threshold": overlap_threshold}
    if not below:
        return generated, meta

    proxies = _depth_proxies(cond, renderer_depths)
    new_warped = cond.warped.copy()
    new_masks = cond.masks.copy()
    for i in below:
        # candidate 0 is the reference itself; m + 1 labels generated view m
        best_label, best_ov = 0, overlaps[i]
        for m in range(n):
            if m == i or not (proxies[m] > 0).any():
                continue
            res = forward_warp(generated[m], proxies[m], cond.cameras[m + 1], cond.cameras[i + 1])
            ov = overlap_ratio(res.mask)
            if ov > best_ov:
                best_label, best_ov = m + 1, ov
        meta["sources"][i] = best_label
        if best_label > 0:
            m = best_label - 1
            res = forward_warp(generated[m], proxies[m], cond.cameras[m + 1], cond.cameras[i + 1])
            new_warped[i] = res.image
            new_masks[i] = res.mask

    cond2 = replace(cond, warped=new_warped, masks=new_masks)
    out = ddim_sample(model, cond2, sched, num_steps, seed=derive_seed(seed, 1),
                      structured=structured)
    meta["passes"] = 2
    return out, meta
