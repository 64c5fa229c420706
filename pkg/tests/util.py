"""Shared test fixtures: tiny scenes, conditioning, and closed-form oracles."""

import numpy as np

from viewsynth import diffusion as df
from viewsynth import scenegen as sg


def small_conditioning(seed=0, n=3, res=16, kind="scan", **flags):
    scene = sg.generate_scene(seed)
    traj = sg.generate_trajectory(scene, kind, n + 1, seed=seed, resolution=res)
    frames = sg.render_sequence(scene, traj, res)
    cond = df.build_conditioning(frames[0].image, frames[0].depth,
                                 [f.camera for f in frames], **flags)
    return scene, traj, frames, cond


class GaussianOptimalPredictor:
    """Closed-form optimal noise predictor for data ~ N(mu, sigma^2 I).

    With z_t = a z0 + b eps (a = sqrt(alpha_bar), b = sqrt(1 - alpha_bar)),
    the posterior mean of eps given z_t is b (z_t - a mu) / (a^2 sigma^2 + b^2).
    """

    def __init__(self, mu, sigma, sched):
        self.mu = mu
        self.sigma = sigma
        self.sched = sched

    def predict(self, z, cond, t):
        ab = self.sched.alpha_bar[t]
        v = ab * self.sigma ** 2 + (1.0 - ab)
        return (np.sqrt(1.0 - ab) * (z - np.sqrt(ab) * self.mu) / v).astype(np.float32)


class ConstantNoisePredictor:
    """Always answers with a fixed noise field (the perfect-oracle case)."""

    def __init__(self, xi):
        self.xi = np.asarray(xi, dtype=np.float32)

    def predict(self, z, cond, t):
        return self.xi


def histogram_kl(samples, mu, sigma, bins=30, span=4.0):
    """KL(empirical bins || true gaussian bins) in nats."""
    from math import erf

    edges = np.linspace(mu - span * sigma, mu + span * sigma, bins + 1)
    h, _ = np.histogram(samples, bins=edges)
    p = h / h.sum()
    cdf = lambda x: 0.5 * (1 + erf((x - mu) / (sigma * np.sqrt(2))))
    q = np.array([cdf(edges[i + 1]) - cdf(edges[i]) for i in range(bins)])
    q = q / q.sum()
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))
