"""Embedding kernels (knowledge-graph energy, bipartite proximity) and the joint trainer."""
