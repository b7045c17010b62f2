"""Graph storage, persistence and synthetic dataset generation."""
