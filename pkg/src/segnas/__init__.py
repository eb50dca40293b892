"""Search engine for mixed-block encoder-decoder segmentation architectures."""

__version__ = "0.1.0"
