"""Multi-scale detector for bladder tumor phantoms, built on a small numpy autodiff."""

__version__ = "0.1.0"
