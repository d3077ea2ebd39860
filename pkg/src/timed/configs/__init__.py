"""Packaged run presets (JSON)."""
