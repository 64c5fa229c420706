"""Desk-scale consistent novel view synthesis toolkit.

Single-image view extrapolation on procedurally generated scenes: depth-based
forward warping, structured diffusion noise, a multi-view denoiser with a
zero-initialized control branch, deterministic DDIM sampling, and epipolar
consistency metrics, all on a small numpy-backed autodiff core.
"""

__version__ = "0.1.0"
