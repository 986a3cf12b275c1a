"""Cortical-surface decoding with spherical tokenization and structure-guided experts.

Submodules: :mod:`mesh`, :mod:`roi`, :mod:`grad`, :mod:`sconv`, :mod:`srst`,
:mod:`sgmoe`, :mod:`model`, :mod:`synth`, :mod:`analysis`, :mod:`cli`.
"""

__version__ = "0.1.0"
