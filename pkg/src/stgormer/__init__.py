"""Spatio-temporal graph transformer for traffic forecasting.

Core pieces: structural graph encodings (degree centrality, shortest-path
distances), periodic time encoding, axis-wise multi-head attention with a
learnable shortest-path bias, mixture-of-experts feedforward blocks with a
load-balancing loss, and a deterministic train/evaluate/forecast pipeline.
"""
import os as _os

# Desk-scale tensors: threaded BLAS loses to its own synchronization here and
# single-threaded reductions keep results reproducible. Respected only if the
# user has not chosen; must be set before numpy first loads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
