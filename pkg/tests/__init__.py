"""Test suite for the meta-embedding package."""
