"""Two-stage click-through-rate prediction: sparse networks feeding boosted trees."""

__version__ = "0.1.0"
