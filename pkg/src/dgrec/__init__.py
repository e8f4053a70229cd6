"""Diversified graph-based recommendation: submodular neighbor selection,
light graph convolution with layer attention, class-balanced BPR."""

__version__ = "0.1.0"
