"""Teacher-mined hard negatives and uncertainty-weighted distillation for cross-modal matching scorers."""

__version__ = "0.1.0"
