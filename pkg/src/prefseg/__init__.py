"""Preference-aligned domain-adaptive segmentation, desk scale.

A small promptable pixel classifier is adapted from a labeled source
domain to a shifted target domain in two stages: mean-teacher
self-training with sparse point prompts, then direct preference
optimization on thresholded candidate segmentations (global, local,
sparse-local, or unsupervised preferences).  Everything runs on CPU
with analytically differentiated numpy code.
"""

__version__ = "0.1.0"
