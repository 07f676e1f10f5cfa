"""Performance models and semantic checks for fine-grained MoE inference."""

__version__ = "0.1.0"
