"""Tests for aligndistil-lab."""
