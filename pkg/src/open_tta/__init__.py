"""Open-set test-time adaptation with confidence-difference sample selection."""

__all__ = [
    "__version__",
]

__version__ = "0.1.0"
