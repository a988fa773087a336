"""Utility modules for Impatient Networks."""
