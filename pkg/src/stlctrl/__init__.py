"""Trajectory-feedback neural controllers for Signal Temporal Logic specifications."""

__version__ = "0.1.0"
