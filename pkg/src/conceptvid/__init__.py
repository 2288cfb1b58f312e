"""Concept-to-video retrieval with attention-based dual encoders.

Submodules:

- ``taxonomy``: concept hierarchy, loading and query expansion
- ``autodiff``: numpy tensors with reverse-mode gradients
- ``encoders``: video and text encoders into a common space
- ``training``: hardest-negative ranking loss and the training loop
- ``retrieval``: shot index, concept ranking, run files
- ``evaluation``: extended inferred average precision
- ``corpus``: file formats, vocabulary and the synthetic corpus
- ``cli``: command-line entry point
"""
from .encoders import (EmbeddingTable, EncoderConfig, EncoderParams, FeatureSequence,
                       TokenSequence, encode_text, encode_video, init_params, similarity)
from .taxonomy import (AugmentedQuery, Concept, ConceptTree, ancestors, expand_query,
                       load_shipped_taxonomy, load_taxonomy)

__version__ = "0.1.0"

__all__ = [
    "AugmentedQuery", "Concept", "ConceptTree", "EmbeddingTable", "EncoderConfig",
    "EncoderParams", "FeatureSequence", "TokenSequence", "ancestors", "encode_text",
    "encode_video", "expand_query", "init_params", "load_shipped_taxonomy", "load_taxonomy",
    "similarity",
]
