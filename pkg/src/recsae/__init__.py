"""Sparse autoencoders over frozen recommender embeddings.

Train a small two-tower recommender, fit a prediction-aware SAE on its
user and item embeddings, then inspect, measure and edit the latent units.
"""
__version__ = "0.1.0"
