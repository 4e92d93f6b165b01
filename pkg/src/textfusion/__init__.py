"""Fine-grained image classification from visual features and spotted scene text."""

__version__ = "0.1.0"
