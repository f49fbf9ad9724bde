"""Universal-to-specific classification: a universal branch makes the first
call, a mask network turns category-similarity structure into spatial
attention for confusable classes, and a category-specific branch rethinks
the prediction under that mask."""

__version__ = "0.1.0"
