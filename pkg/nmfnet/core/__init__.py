"""Tensor primitives and buffer accounting."""
