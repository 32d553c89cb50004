"""Synthetic corpus: planted-finding images, restructured notes, instruction data."""
