"""Knowledge-graph community indexing and dynamic retrieval engine.

Builds multi-source medical concept graphs, collapses synonyms, organizes
the result into hierarchically detected and summarized communities, and
augments per-patient contexts through a relevance-scored greedy selection
loop, emitting fine-tune-ready datasets and evaluation metrics.
"""

__version__ = "0.1.0"
