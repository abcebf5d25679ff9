"""Region-aware masked-image-modeling pre-training for face security tasks,
with self-distilled instance discrimination, efficient adapter tuning, and a
downstream evaluation/analysis harness."""

__version__ = "0.1.0"
