"""Query-conditioned image semantic coding over a simulated fading channel."""

__version__ = "0.1.0"
