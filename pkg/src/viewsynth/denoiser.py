"""Multi-view noise predictor with a zero-initialized control branch.

A small two-level U-Net runs per view; at each level, attention across the
view axis lets every spatial location exchange information with the same
location in all other views, which is where cross-view correspondences are
learned. A copy of the encoder ingests the warped reference plus its validity
mask and is fused into every spatial layer through zero-initialized 1x1
convolutions, so at initialization the model is exactly blind to the warped
condition. Global conditioning (reference embedding, per-view pose embedding,
a constant rate token) enters through cross-attention.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tc
from .diffusion import (Conditioning, DiffusionSchedule, build_conditioning, derive_seed,
                        make_schedule, training_loss)
from .errors import NumericError
from .scenegen import DepthNoiseModel, corrupt_depth


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 32
    base_channels: int = 32   # level-0 width
    mid_channels: int = 64    # level-1 width
    sem_dim: int = 64         # semantic-condition width
    time_dim: int = 32
    timesteps: int = 1000     # size of the timestep embedding table
    pose_freqs: int = 4       # sinusoidal lift octaves for pose vectors

    def to_dict(self):
        return asdict(self)


def pose_lift(pose_vecs: np.ndarray, freqs: int) -> np.ndarray:
    """Sinusoidal lift of raw 12-d pose vectors: [x, sin(2^k x), cos(2^k x)].

    The identity pose maps to the lift of (1,0,0, 0,1,0, 0,0,1, 0,0,0),
    a fixed vector for any given number of octaves.
    """
    p = np.asarray(pose_vecs, dtype=np.float32)
    parts = [p]
    for k in range(freqs):
        parts.append(np.sin(p * (2.0 ** k)))
        parts.append(np.cos(p * (2.0 ** k)))
    return np.concatenate(parts, axis=-1)


def _linear(rng, n_in, n_out, std=None, dtype=np.float32):
    std = (1.0 / np.sqrt(n_in)) if std is None else std
    w = tc.parameter((rng.standard_normal((n_in, n_out)) * std).astype(dtype))
    b = tc.parameter(np.zeros(n_out, dtype=dtype))
    return w, b


def init_params(cfg: DenoiserConfig, init: str = "video_prior_sim", seed: int = 0) -> dict:
    """All trainable weights, in checkpoint order.

    init == "scratch" draws everything randomly; "video_prior_sim" runs a
    short temporal-smoothing pretext task on renderer videos that pre-trains
    the cross-view attention projections before any view-synthesis training.
    Control fusion weights are exactly zero either way.
    """
    if init not in ("scratch", "video_prior_sim"):
        raise ValueError(f"unknown init mode {init!r}")
    rng = np.random.default_rng([int(seed), 0x1217])
    c1, c2, sem = cfg.base_channels, cfg.mid_channels, cfg.sem_dim
    p: dict[str, tc.Tensor] = {}

    def conv(name, o, i, std=None):
        k, b = tc.conv_kernel(o, i, rng=rng)
        if std is not None:
            k = tc.parameter((rng.standard_normal(k.shape) * std).astype(np.float32))
        p[f"{name}.k"], p[f"{name}.b"] = k, b

    conv("conv_in", c1, 3)
    conv("enc0a", c1, c1)
    conv("enc0b", c1, c1)
    conv("enc1a", c2, c1)
    conv("enc1b", c2, c2)
    conv("dec1a", c2, c2)
    conv("dec1b", c2, c2)
    conv("up", c1, c2)
    conv("dec0a", c1, 2 * c1)
    conv("dec0b", c1, c1)
    conv("conv_out", 3, c1, std=1e-2)

    for level, width in ((0, c1), (1, c2)):
        for branch in "ed":
            for mat, n_in in (("wq", width), ("wk", width), ("wv", width), ("wo", width)):
                w, b = _linear(rng, n_in, width)
                p[f"attn{level}{branch}.{mat}"], p[f"attn{level}{branch}.{mat}_b"] = w, b
            for mat, n_in in (("wq", width), ("wk", sem), ("wv", sem), ("wo", width)):
                w, b = _linear(rng, n_in, width)
                p[f"xattn{level}{branch}.{mat}"], p[f"xattn{level}{branch}.{mat}_b"] = w, b

    p["time.table"] = tc.parameter(
        (rng.standard_normal((cfg.timesteps + 1, cfg.time_dim)) * 0.05).astype(np.float32))
    p["time.proj0"], p["time.proj0_b"] = _linear(rng, cfg.time_dim, c1)
    p["time.proj1"], p["time.proj1_b"] = _linear(rng, cfg.time_dim, c2)

    lift_dim = 12 * (1 + 2 * cfg.pose_freqs)
    p["pose.w"], p["pose.b"] = _linear(rng, lift_dim, sem)
    conv("refenc1", 16, 3)
    conv("refenc2", 32, 16)
    p["refenc.w"], p["refenc.b"] = _linear(rng, 32, sem)
    p["sem.rate"] = tc.parameter((rng.standard_normal(sem) * 0.1).astype(np.float32))

    conv("ctrl_in", c1, 4)  # warped reference rgb + validity mask channel
    conv("ctrl0a", c1, c1)
    conv("ctrl0b", c1, c1)
    conv("ctrl1a", c2, c1)
    conv("ctrl1b", c2, c2)

    fusion = [("enc0a", c1, c1), ("enc0b", c1, c1), ("enc1a", c2, c2), ("enc1b", c2, c2),
              ("dec1a", c2, c2), ("dec1b", c2, c2), ("dec0a", c1, c1), ("dec0b", c1, c1)]
    for name, ci, co in fusion:
        p[f"fuse_{name}.w"] = tc.parameter(np.zeros((ci, co), dtype=np.float32))
        p[f"fuse_{name}.b"] = tc.parameter(np.zeros(co, dtype=np.float32))

    if init == "video_prior_sim":
        pretext_pretrain(cfg, p, seed=derive_seed(seed, 0xF1DE0))
    return p


class Denoiser:
    """Bundles config and parameters; forward builds the autodiff graph,
    predict runs the same computation gradient-free."""

    def __init__(self, cfg: DenoiserConfig, params: dict):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: DenoiserConfig, init: str = "video_prior_sim", seed: int = 0):
        return cls(cfg, init_params(cfg, init=init, seed=seed))

    @property
    def param_count(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    def astype(self, dtype):
        return Denoiser(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    # ------------------------------------------------------------------

    def _conv(self, p, name, x):
        return tc.conv2d(x, p[f"{name}.k"], p[f"{name}.b"])

    def _fuse(self, p, name, feat):
        # zero-initialized 1x1 convolution as a channel matmul
        n, c, h, w = feat.shape
        flat = tc.reshape(tc.transpose(feat, (0, 2, 3, 1)), (n * h * w, c))
        out = tc.add(tc.matmul(flat, p[f"fuse_{name}.w"]), p[f"fuse_{name}.b"])
        co = p[f"fuse_{name}.w"].shape[1]
        return tc.transpose(tc.reshape(out, (n, h, w, co)), (0, 3, 1, 2))

    def _proj(self, p, prefix, mat, tokens_2d):
        return tc.add(tc.matmul(tokens_2d, p[f"{prefix}.{mat}"]), p[f"{prefix}.{mat}_b"])

    def _view_attention(self, p, level, branch, h):
        """Attention across the view axis at every spatial location."""
        n, c, hh, ww = h.shape
        tok = tc.reshape(tc.transpose(h, (2, 3, 0, 1)), (hh * ww * n, c))
        pre = f"attn{level}{branch}"
        q = tc.reshape(self._proj(p, pre, "wq", tok), (hh * ww, n, c))
        k = tc.reshape(self._proj(p, pre, "wk", tok), (hh * ww, n, c))
        v = tc.reshape(self._proj(p, pre, "wv", tok), (hh * ww, n, c))
        a = tc.reshape(tc.attention(q, k, v), (hh * ww * n, c))
        out = tc.reshape(self._proj(p, pre, "wo", a), (hh, ww, n, c))
        return tc.add(h, tc.transpose(out, (2, 3, 0, 1)))

    def _semantic_attention(self, p, level, branch, h, ctx):
        """Per-view cross-attention from spatial tokens into the semantic
        condition tokens (reference embedding, pose embedding, rate token)."""
        n, c, hh, ww = h.shape
        ntok = ctx.shape[1]
        tok = tc.reshape(tc.transpose(h, (0, 2, 3, 1)), (n * hh * ww, c))
        pre = f"xattn{level}{branch}"
        q = tc.reshape(self._proj(p, pre, "wq", tok), (n, hh * ww, c))
        ctx2 = tc.reshape(ctx, (n * ntok, ctx.shape[2]))
        k = tc.reshape(self._proj(p, pre, "wk", ctx2), (n, ntok, c))
        v = tc.reshape(self._proj(p, pre, "wv", ctx2), (n, ntok, c))
        a = tc.reshape(tc.attention(q, k, v), (n * hh * ww, c))
        out = tc.reshape(self._proj(p, pre, "wo", a), (n, hh, ww, c))
        return tc.add(h, tc.transpose(out, (0, 3, 1, 2)))

    def _semantic_context(self, p, cond: Conditioning, n: int):
        ref = tc.silu(self._conv(p, "refenc1", tc.constant(cond.reference[None])))
        ref = tc.avg_pool2(ref)
        ref = tc.silu(self._conv(p, "refenc2", ref))
        ref = tc.mean_axes(tc.avg_pool2(ref), (2, 3))
        ref = tc.add(tc.matmul(ref, p["refenc.w"]), p["refenc.b"])      # (1, sem)
        ones = tc.constant(np.ones((n, 1), dtype=ref.dtype))
        ref_n = tc.reshape(tc.matmul(ones, ref), (n, 1, self.cfg.sem_dim))
        lift = pose_lift(cond.pose_vecs, self.cfg.pose_freqs).astype(ref.dtype)
        pose = tc.add(tc.matmul(tc.constant(lift), p["pose.w"]), p["pose.b"])
        pose_n = tc.reshape(pose, (n, 1, self.cfg.sem_dim))
        rate = tc.reshape(p["sem.rate"], (1, self.cfg.sem_dim))
        rate_n = tc.reshape(tc.matmul(ones, rate), (n, 1, self.cfg.sem_dim))
        return tc.concat([ref_n, pose_n, rate_n], axis=1)               # (n, 3, sem)

    def forward(self, z_t, cond: Conditioning, t: int, params: dict | None = None) -> tc.Tensor:
        p = self.params if params is None else params
        z = np.asarray(z_t)
        if z.ndim != 4 or z.shape[1] != 3:
            raise tc.ShapeError(f"expected (N,3,H,W) noisy views, got {z.shape}")
        n = z.shape[0]
        if n != cond.n_views:
            raise tc.ShapeError(f"batch has {n} views but conditioning has {cond.n_views}")
        if not (0 <= t <= self.cfg.timesteps):
            raise ValueError(f"timestep {t} outside the embedding table")
        dtype = p["conv_in.k"].dtype
        x = tc.constant(z.astype(dtype, copy=False))

        temb = tc.reshape(tc.take_row(p["time.table"], t), (1, self.cfg.time_dim))
        t0 = tc.reshape(tc.add(tc.matmul(temb, p["time.proj0"]), p["time.proj0_b"]),
                        (1, self.cfg.base_channels, 1, 1))
        t1 = tc.reshape(tc.add(tc.matmul(temb, p["time.proj1"]), p["time.proj1_b"]),
                        (1, self.cfg.mid_channels, 1, 1))

        ctx = self._semantic_context(p, cond, n)

        y_in = np.concatenate([cond.warped, cond.masks[:, None]], axis=1).astype(dtype)
        c = tc.silu(self._conv(p, "ctrl_in", tc.constant(y_in)))
        c0a = tc.silu(self._conv(p, "ctrl0a", c))
        c0b = tc.silu(self._conv(p, "ctrl0b", c0a))
        c1a = tc.silu(self._conv(p, "ctrl1a", tc.avg_pool2(c0b)))
        c1b = tc.silu(self._conv(p, "ctrl1b", c1a))

        h = self._conv(p, "conv_in", x)
        h = tc.silu(tc.add(tc.add(self._conv(p, "enc0a", h), self._fuse(p, "enc0a", c0a)), t0))
        h = tc.silu(tc.add(tc.add(self._conv(p, "enc0b", h), self._fuse(p, "enc0b", c0b)), t0))
        h = self._view_attention(p, 0, "e", h)
        h = self._semantic_attention(p, 0, "e", h, ctx)
        skip = h
        h = tc.avg_pool2(h)
        h = tc.silu(tc.add(tc.add(self._conv(p, "enc1a", h), self._fuse(p, "enc1a", c1a)), t1))
        h = tc.silu(tc.add(tc.add(self._conv(p, "enc1b", h), self._fuse(p, "enc1b", c1b)), t1))
        h = self._view_attention(p, 1, "e", h)
        h = self._semantic_attention(p, 1, "e", h, ctx)
        h = tc.silu(tc.add(tc.add(self._conv(p, "dec1a", h), self._fuse(p, "dec1a", c1b)), t1))
        h = tc.silu(tc.add(tc.add(self._conv(p, "dec1b", h), self._fuse(p, "dec1b", c1b)), t1))
        h = self._view_attention(p, 1, "d", h)
        h = self._semantic_attention(p, 1, "d", h, ctx)
        h = tc.upsample2(tc.silu(self._conv(p, "up", h)))
        h = tc.concat([h, skip], axis=1)
        h = tc.silu(tc.add(tc.add(self._conv(p, "dec0a", h), self._fuse(p, "dec0a", c0b)), t0))
        h = tc.silu(tc.add(tc.add(self._conv(p, "dec0b", h), self._fuse(p, "dec0b", c0b)), t0))
        h = self._view_attention(p, 0, "d", h)
        h = self._semantic_attention(p, 0, "d", h, ctx)
        return self._conv(p, "conv_out", h)

    def predict(self, z_t, cond: Conditioning, t: int) -> np.ndarray:
        frozen = {k: tc.constant(v.data) for k, v in self.params.items()}
        return self.forward(z_t, cond, t, params=frozen).data


# ---------------------------------------------------------------------------
# pretext pretraining (simulated video prior)


def pretext_pretrain(cfg: DenoiserConfig, params: dict, seed: int,
                     steps: int = 120, lr: float = 2e-3, n_frames: int = 5):
    """Temporal-smoothing pretext: denoise unconditioned renderer videos.

    Only the cross-view attention projections are updated, giving them a
    consistency-seeking initialization before any view-synthesis training.
    Mutates `params` in place (attention keys only).
    """
    from .scenegen import generate_scene, generate_trajectory, render_sequence

    sched = make_schedule(cfg.timesteps)
    model = Denoiser(cfg, params)
    seqs = []
    for i in range(6):
        scene = generate_scene(derive_seed(seed, 10 + i))
        kind = "dolly" if i % 2 == 0 else "scan"
        traj = generate_trajectory(scene, kind, n_frames + 1, seed=derive_seed(seed, 20 + i),
                                   resolution=cfg.resolution, step=0.12, sweep_deg=30.0)
        seqs.append(render_sequence(scene, traj, cfg.resolution))
    attn_keys = [k for k in params if k.startswith("attn")]
    opt = tc.adam_init({k: params[k] for k in attn_keys})
    for step in range(steps):
        rng = np.random.default_rng([int(seed), 0x9E7E, step])
        seq = seqs[int(rng.integers(len(seqs)))]
        cond = build_conditioning(seq[0].image, seq[0].depth, [f.camera for f in seq],
                                  no_warp=True, no_pose=True)
        views = np.stack([f.image for f in seq[1:]])
        _, grads, _ = training_loss(model, views, cond, sched,
                                    seed=derive_seed(seed, step), structured=False)
        sub, opt = tc.adam_step({k: params[k] for k in attn_keys},
                                {k: grads[k] for k in attn_keys}, opt, lr)
        params.update(sub)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSettings:
    steps: int = 2000
    lr: float = 1e-3
    seed: int = 0
    structured_noise: bool = True
    no_warp: bool = False
    no_pose: bool = False
    depth_sigma: float = 0.05        # training-time depth corruption
    depth_scale_min: float = 0.9
    depth_scale_max: float = 1.1
    corrupt_depth: bool = True
    checkpoint_every: int = 500
    log_every: int = 50


def train(model: Denoiser, dataset: list, settings: TrainSettings,
          sched: DiffusionSchedule | None = None, on_checkpoint=None):
    """Optimize the denoiser on posed sequences; returns (model, loss_log).

    dataset: list of sequences, each a list of PosedFrame with frame 0 as the
    reference. The loss log rows are (step, loss, wallclock_seconds). NaN or
    inf loss aborts with a diagnostic; the last checkpoint stays on disk.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    sched = sched or make_schedule(model.cfg.timesteps)
    opt = tc.adam_init(model.params)
    log = []
    start = time.perf_counter()
    for step in range(settings.steps):
        rng = np.random.default_rng([settings.seed, 0x57E9, step])
        seq = dataset[int(rng.integers(len(dataset)))]
        depth = seq[0].depth
        if settings.corrupt_depth:
            noise_model = DepthNoiseModel(
                sigma=settings.depth_sigma,
                scale=float(rng.uniform(settings.depth_scale_min, settings.depth_scale_max)))
            depth = corrupt_depth(depth, noise_model, seed=derive_seed(settings.seed, step, 3))
        cond = build_conditioning(seq[0].image, depth, [f.camera for f in seq],
                                  no_warp=settings.no_warp, no_pose=settings.no_pose)
        views = np.stack([f.image for f in seq[1:]])
        loss, grads, t = training_loss(model, views, cond, sched,
                                       seed=derive_seed(settings.seed, step),
                                       structured=settings.structured_noise)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} at step {step} (t={t}); "
                               "last checkpoint retained")
        new_params, opt = tc.adam_step(model.params, grads, opt, settings.lr)
        model.params = new_params
        log.append((step, loss, time.perf_counter() - start))
        if on_checkpoint and settings.checkpoint_every and \
                (step + 1) % settings.checkpoint_every == 0:
            on_checkpoint(step + 1, model)
    return model, log
