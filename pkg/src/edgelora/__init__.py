"""LoRA-based continual learning for edge flow classification."""

__version__ = "0.1.0"
