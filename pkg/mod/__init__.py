"""Adaptive reach-avoid safety pipeline for a planar mobile robot."""
