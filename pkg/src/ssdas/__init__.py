"""Semi-supervised domain-adaptive segmentation with jigsaw-context alignment."""
__version__ = "0.1.0"
