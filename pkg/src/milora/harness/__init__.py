"""Configuration, datasets, checkpoints, experiment runner and CLI."""
