"""Patient composition and interaction-aware medicine recommendation."""
