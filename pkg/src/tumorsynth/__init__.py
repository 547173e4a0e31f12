"""Latent-diffusion lesion synthesis for PET-CT segmentation data augmentation, on synthetic phantoms."""

__version__ = "0.1.0"
