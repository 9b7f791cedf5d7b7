"""Desk-scale Text-VQA toolkit: OCR line clustering, PHOC, a small autodiff
engine, a pointer-network answer decoder and multi-source answer selection."""

__version__ = "0.1.0"
