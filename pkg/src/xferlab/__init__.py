"""Transfer-learning laboratory for paired-modality sleep staging."""

__version__ = "0.1.0"
