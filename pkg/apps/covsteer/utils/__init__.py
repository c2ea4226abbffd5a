"""Shared helpers: logging setup and small symmetric-matrix utilities."""
