"""Noise-aware training of parameterized quantum circuits, simulated exactly."""

__version__ = "0.1.0"

from .errors import ConfigError  # noqa: E402

__all__ = ["ConfigError", "__version__"]
