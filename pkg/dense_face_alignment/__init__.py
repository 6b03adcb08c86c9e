"""
Dense face correspondence and morphable-model alignment.
"""

__version__ = "0.1.0"
