"""Tests for the QE lab."""
