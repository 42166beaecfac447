"""Graph-convolutional global prototypical networks for generalized few-shot learning."""

__version__ = "0.1.0"
