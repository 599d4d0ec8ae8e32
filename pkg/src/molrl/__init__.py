"""RL-guided fine-tuning of an equivariant 3D molecular diffusion model."""

__version__ = "0.1.0"
