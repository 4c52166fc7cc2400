"""Inter/intra-video contrastive pretraining on a small numpy autodiff core."""

__version__ = "0.1.0"
