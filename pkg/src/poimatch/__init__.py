"""Query-POI matching with geographic-context pre-training."""

__version__ = "0.1.0"
