"""Station-decomposed V2G fleet scheduling."""
