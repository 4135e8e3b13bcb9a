"""Dialogue Lab package."""
