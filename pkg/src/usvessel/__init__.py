"""Vessel segmentation in freehand 3D ultrasound.

Modules: ``volume`` (MetaImage I/O and preprocessing), ``compound`` (tracked
frame reconstruction), ``augment``, ``autodiff``, ``unet``, ``train``,
``metrics``, ``phantom`` and ``cli``.
"""

__version__ = "0.1.0"
