"""Multi-view hypergraph contrastive recommender with a fairness harness."""

__version__ = "0.1.0"
