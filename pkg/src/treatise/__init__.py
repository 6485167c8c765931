"""Segmentation, knowledge-enriched labeling, retrieval, and evaluation for
illustrations in historical shipbuilding treatises."""

__version__ = "0.1.0"
