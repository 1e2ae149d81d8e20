"""Self-supervised tuning (SST) for few-shot segmentation, built on a small numpy autodiff core."""

__version__ = "0.1.0"
