"""Lens Probe Toolkit application layer: CLI entry point and run configuration"""
