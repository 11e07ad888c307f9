"""Downstream-vs-upstream transfer analysis: frontiers, saturating power laws,
rank statistics and a toy pretrain-and-probe lab."""

__version__ = "0.1.0"
