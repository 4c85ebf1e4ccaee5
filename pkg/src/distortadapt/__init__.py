"""Unsupervised adaptation of an instance segmenter to unknown image distortions.

The package is organised around a three-branch experiment: a segmenter trained
on pristine images is evaluated on distorted images (baseline), retrained on
truly distorted images (oracle), and retrained on images pushed through a
distortion emulator learned from unpaired examples (learned).
"""

__version__ = "0.1.0"
