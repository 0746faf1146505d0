# wildeuler/__init__.py
"""
Wildeuler package: numerical convex integration for the semi-stationary
isentropic Euler system on the periodic torus
"""

__version__ = "0.1.0"
