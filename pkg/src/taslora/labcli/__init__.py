"""Experiment front-end: configs, data, checkpoints and the command line."""
