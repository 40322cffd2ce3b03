"""Prompt-conditioned diffusion lifting of 2D keypoint sequences to 3D poses.

Subsystems: closed-form diffusion math (``diffusion``), the learnable prompt
bank (``prompts``), the transformer denoiser over a minimal autodiff engine
(``denoiser``/``autodiff``), multi-hypothesis DDIM inference with joint-wise
reprojection aggregation (``sampler``), training (``training``), metrics
(``metrics``), dataset and container I/O (``data``/``container``), and the
CLI (``cli``).
"""

__version__ = "0.1.0"
