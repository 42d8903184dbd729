"""Synthetic beamformed-fingerprint localization toolkit.

Builds binarized multipath fingerprints on a grid of candidate positions,
generates kinematically constrained trajectories, and trains sequence
models (transformer encoder-decoder, RNN/LSTM baselines) to predict the
next position, all on a from-scratch reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
