"""Synthetic vessel corpus, PGM I/O and augmentation."""
