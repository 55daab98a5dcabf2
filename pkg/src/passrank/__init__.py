"""Passage-level contextual re-ranking at desk scale.

First-stage lexical retrieval, sliding-window passages, a small numpy
transformer cross-encoder, FirstP/MaxP/SumP aggregation and TREC-style
evaluation.
"""

__version__ = "0.1.0"
