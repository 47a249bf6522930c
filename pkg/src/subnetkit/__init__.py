"""Elastic shrinking of a small decoder-only language model.

Layer selection by dynamic programming, fluctuation-based width selection,
a shape-routed mixture of LoRAs fine-tuned jointly over all subnet shapes,
and extraction, search and profiling of individual subnets.
"""

__version__ = "0.1.0"
