"""Semi-supervised segmentation pipeline: corpus curation, consistency
pre-training, and multi-dataset fine-tuning with expert-split FFNs."""

__version__ = "0.1.0"
