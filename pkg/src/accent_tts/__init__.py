"""Accented text-to-speech: accent-aware G2P front-end, bottleneck-driven
acoustic model with pitch/duration predictors, DSP utilities and metrics."""

__version__ = "0.1.0"
