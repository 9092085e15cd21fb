"""Knowledge-based hierarchical POMDP planning."""

__version__ = "0.1.0"
