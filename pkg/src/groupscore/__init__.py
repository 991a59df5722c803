"""Dynamic account-level conversion scoring from the activity logs of the
individuals in a buying group, using a hierarchical attention network."""

__version__ = "0.1.0"
