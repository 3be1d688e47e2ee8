"""Item-title recommender: train a small text encoder on catalog titles,
embed every article, and serve per-customer top-12 lists from an exact
nearest-neighbor index with a popularity fallback for cold starts."""

__version__ = "0.1.0"
