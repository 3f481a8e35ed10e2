"""Concept discovery and concept-balanced sampling for robust classification."""
