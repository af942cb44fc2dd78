"""Tests for the adaptive safety pipeline."""
