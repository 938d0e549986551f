"""LLM data pipelines: critique corpus, benchmark construction and evaluation."""
