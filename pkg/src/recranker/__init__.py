"""Offline LLM-reranking pipeline for top-k recommendation."""

__version__ = "0.1.0"
