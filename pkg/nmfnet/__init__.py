"""NMF layers trained with approximate backpropagation."""

__version__ = "0.1.0"
