"""Desk-scale emphasis- and emotion-controllable TTS acoustic model.

Subpackages: numerics (autodiff tensors), prosody (emphasis features),
corpus (synthetic data), model (acoustic network), training, evaluation, cli.
"""

__version__ = "0.1.0"
