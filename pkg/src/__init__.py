"""
MedKGRec: joint knowledge-graph and bipartite-graph embedding for
interaction-aware medicine recommendation.
"""

__version__ = "0.1.0"
