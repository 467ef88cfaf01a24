"""Language-initialized self-supervised tracking on synthetic video."""

__version__ = "0.1.0"
