"""Continual vision-and-language navigation on synthetic scene graphs."""
