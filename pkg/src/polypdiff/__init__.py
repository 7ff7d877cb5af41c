"""polypdiff: diffusion-generated synthetic polyp masks and images, plus the
segmentation harness that measures whether the synthetic data helps.

The pipeline has three stages: an unconditional diffusion model over binary
masks, a mask-conditioned diffusion model over images (pixel or latent space),
and a segmentation benchmark that trains small models on real/synthetic
mixtures. Everything is seeded and config-driven; see the README for the CLI.
"""

__version__ = "0.1.0"
