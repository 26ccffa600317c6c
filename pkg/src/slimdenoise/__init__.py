"""Dynamic slimmable denoising: weight-shared slimmable CNN, greedy routing space, per-image gate."""

__version__ = "0.1.0"
