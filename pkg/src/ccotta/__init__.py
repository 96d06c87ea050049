"""Continual test-time adaptation with feature-shift regularizers.

Modules: ``autodiff`` (reverse-mode tape), ``model`` (feature extractor and
head), ``datastream`` (synthetic source data and corruption streams),
``shift`` (prototype shift directions), ``losses``, ``adaptloop`` (mean
teacher adaptation), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
