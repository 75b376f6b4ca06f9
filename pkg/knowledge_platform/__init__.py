"""
Knowledge Homophily Platform
Maps an LLM's factual knowledge onto a knowledge graph and puts the
resulting knowledge homophily to work for selection and retrieval
"""

__version__ = "1.0.0"
