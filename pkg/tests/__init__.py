"""Test suite for iast-lab."""
