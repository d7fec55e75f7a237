"""Configuration, synthetic datasets and the command-line workflows."""
