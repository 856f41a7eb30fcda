"""Filterbanks, attention, blocks and the full enhancement models."""
