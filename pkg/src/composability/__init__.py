"""Measure asset composability from ERC-20 Transfer logs.

Discover wrapped derivatives of root assets, assign each derivative its
composition distance, and count plain versus composed transfer activity
over time.
"""

__version__ = "0.1.0"
