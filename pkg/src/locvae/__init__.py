"""Loc-VAE: a beta-VAE whose latent dimensions are pushed to act on small
regions of a 3D volume, with evaluation and latent-space retrieval."""

__version__ = "0.1.0"
