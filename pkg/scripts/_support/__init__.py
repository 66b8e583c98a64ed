"""Helpers used only by the dyngroup entry points."""
