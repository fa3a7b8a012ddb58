"""Scene-graph-conditioned video synthesis at desk scale."""

__version__ = "0.1.0"
