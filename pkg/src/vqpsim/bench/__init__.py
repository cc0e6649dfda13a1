"""Benchmark harness: scenarios, presets, CSV metrics and acceptance checks."""
