"""Image representation learning from paired text: intra-image infomax plus image-text contrastive terms."""

__version__ = "0.1.0"
