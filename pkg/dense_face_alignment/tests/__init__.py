"""
Test package for dense face alignment.
"""
