"""Anatomy-wise medical vision-language pre-training on synthetic phantoms:
per-organ image-report alignment, disease-level visual contrastive learning,
anatomy-conditioned latent VQ-VAE normality modeling, and discrepancy fusion.
"""

__version__ = "0.1.0"
