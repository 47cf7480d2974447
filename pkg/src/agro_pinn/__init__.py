"""Physics-guided crop drought-stress and yield modeling."""

__version__ = "0.1.0"
