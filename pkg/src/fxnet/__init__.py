"""From-scratch CNN toolkit for facial-expression recognition, filter
visualization, Action Unit correlation and micro-expression sequences."""

__version__ = "0.1.0"
