"""Pursuit-evasion search and tracking with a learned mixture filter and
filter-informed multi-agent reinforcement learning."""

__version__ = "0.1.0"
