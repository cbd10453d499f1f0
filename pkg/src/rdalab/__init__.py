"""Reciprocal distribution alignment for semi-supervised learning, at desk scale."""
