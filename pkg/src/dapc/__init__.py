"""Predictive-information representation learning for noisy sequences.

Submodules: ``autodiff`` (reverse-mode engine), ``pi`` (Gaussian predictive
information), ``masking``, ``encoders``, ``data`` (Lorenz / AR generators and
bundles), ``train``, ``evaluation``, ``baselines``, ``config``, ``runner``,
``plotting`` and ``cli``.
"""

__version__ = "0.1.0"
