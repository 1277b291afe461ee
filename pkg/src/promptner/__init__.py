"""Few-shot NER with prompted label words, a position-aware biaffine span
detector and kNN-augmented rerank inference."""

__version__ = "0.1.0"
