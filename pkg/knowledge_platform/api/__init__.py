"""
API routes for the Knowledge Homophily Platform
"""

from . import runs

__all__ = ['runs']
