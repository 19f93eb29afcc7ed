"""Multi-frame BEV detection on synthetic driving scenes.

Ego-motion alignment of historical frames, dual attention fusion of the
aligned window, multi-stage Top-k query selection, and a staged training
schedule with encoder freezing, all on plain numpy.
"""

__version__ = "0.1.0"
