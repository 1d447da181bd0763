"""Toy video prompt-to-prompt editing: DDIM inversion, shared unconditional
embedding optimization and decoupled-guidance cross-attention control on a
small seeded text-to-set denoiser."""

__version__ = "0.1.0"
