"""Reward fine-tuning of a text-to-motion diffusion model on a synthetic trajectory world."""

__version__ = "0.1.0"
