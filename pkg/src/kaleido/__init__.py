"""Latent-augmented guided diffusion laboratory.

A small, fully deterministic stack for studying how classifier-free
guidance interacts with sample diversity: a from-scratch DDPM over toy
densities, an autoregressive prior over discrete latent tokens, latent
grammars with exact codecs, and the metrics to compare the two
sampling regimes quantitatively.
"""

__version__ = "0.1.0"
