"""Recurrent-convolutional nowcasting with conditional models and ensembling."""

__version__ = "0.1.0"
