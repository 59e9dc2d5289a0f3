"""Tests for rtnlinv package."""
