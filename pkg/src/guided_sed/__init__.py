"""Guided learning for weakly labeled, semi-supervised sound event detection.

A heterogeneous teacher-student framework: a temporally compressive tagging
model (PT) and a full-resolution boundary model (PS) train synchronously,
exchanging clip-level pseudo-tags on unlabeled clips. The package also ships
weakly-supervised-only and Mean Teacher baselines, a synthetic corpus
generator with exact ground truth, median-filter post-processing, and
collar-based event evaluation.
"""

__version__ = "0.1.0"
