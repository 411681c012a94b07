"""Desk-scale toolkit for hard-batch contrastive training and
corpus-conditioned document embeddings.

Pipeline: ingest pairs -> surrogate-embed -> cluster into pseudo-domains ->
pack fixed-size batches -> mask false negatives -> train (biencoder or
contextual two-stage encoder) -> evaluate retrieval.
"""

__version__ = "0.1.0"
