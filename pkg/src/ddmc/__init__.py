"""Dual-domain multi-contrast MRI reconstruction on synthetic phantoms.

A fully-sampled reference contrast assists reconstruction of an
undersampled, motion-corrupted target contrast through three trained
stages (cross-contrast synthesis, rigid registration, reconstruction)
run as paired image-space and k-space branches tied together by
cross-domain consistency losses.
"""

__version__ = "0.1.0"
