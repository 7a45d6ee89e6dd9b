"""One-shot 3D segmentation by joint registration and segmentation, with a
distilled general encoder, mutual-EMA co-training and auto-prompting."""

__version__ = "0.1.0"
