"""Video re-localization with cross gated bilinear matching, on a small numpy autodiff core."""

__version__ = "0.1.0"
