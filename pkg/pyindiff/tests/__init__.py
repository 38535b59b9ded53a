"""Pyindiff tests."""
