"""Few-shot prompted self-training with adapters on a frozen toy transformer."""

__version__ = "0.1.0"
