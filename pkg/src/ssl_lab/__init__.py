"""Semi-supervised image classification with consistency regularisation, on a numpy autodiff core."""

__version__ = "0.1.0"
