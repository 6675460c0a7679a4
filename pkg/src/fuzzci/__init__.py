"""Commit-driven continuous fuzzing: target selection by normalized binary
fingerprints, corpus carryover, priority-scaled ensemble campaigns, and a
virtual-clock simulator for campaign-duration experiments."""

__version__ = "0.1.0"
