"""Adversarial forgetting with a time-pooled squeeze-excitation mask."""
