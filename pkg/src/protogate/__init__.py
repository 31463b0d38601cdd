"""protogate: few-shot open-set recognition over precomputed embeddings.

Pipeline stages: representative-sample selection, context-prototype
attention fusion with a trainable closed-set head, prototype-alignment
training of an open-set scorer, and threshold-gated inference that routes
unknowns to a pluggable fallback classifier.
"""

__version__ = "0.1.0"
