"""Sparse expert synchronisation (SPES) for mixture-of-experts training at desk scale.

Modules: ``tensor`` (reverse-mode autodiff), ``model`` (MoE language
model), ``trainer`` (masked local optimisation), ``wire``/``protocol``/``transport``
(parameter-server rounds), ``merging`` (expert merging), ``cost`` and
``theory`` (analytic and empirical checks), ``data``/``experiment``/``cli``.
"""

__version__ = "0.1.0"
