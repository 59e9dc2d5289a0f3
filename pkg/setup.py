#!/usr/bin/env python3
"""Setup script for rtnlinv package."""

from setuptools import setup

# Configuration is in pyproject.toml
setup()
