"""
Switching control solver for the 2D heat equation.
"""

__version__ = "1.0.0"
