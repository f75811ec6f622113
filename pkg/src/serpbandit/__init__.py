"""Contextual-bandit re-ranking of search results with offline replay evaluation."""

from serpbandit.errors import SerpBanditError

__version__ = "0.1.0"

__all__ = ["SerpBanditError", "__version__"]
