"""Semantic labelling of airborne LiDAR point clouds with point and group attention.

The network runs on a small float64 reverse-mode autodiff engine
(:mod:`dapnet.engine`); everything else is plain numpy.
"""

__version__ = "0.1.0"
