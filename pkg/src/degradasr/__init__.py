"""degradasr: blind super-resolution for novel degradations.

Pipeline stages: degradation-representation learning, latent sampling,
degradation-consistent HR->LR generation, and downstream SR training.
"""

__version__ = "0.1.0"
