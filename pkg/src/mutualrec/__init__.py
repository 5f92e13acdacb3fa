"""Bidirectional knowledge distillation between a sequential recommender and an LLM-style proxy."""

__version__ = "0.1.0"
