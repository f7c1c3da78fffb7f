"""Latent-space mode analysis, GMM diffusion theory and a toy masked-autoencoder tokenizer."""

__version__ = "0.1.0"
