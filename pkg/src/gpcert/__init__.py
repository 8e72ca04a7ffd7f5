"""Certified GP-based optimal control."""
