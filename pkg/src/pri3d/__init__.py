"""Geometric pre-training machinery for RGB-D sequences.

Correspondence mining between views, pixel-voxel matching against occupancy
chunks, and a contrastive objective with analytic gradients, plus a
procedural scene generator that provides exact ground truth.
"""

__version__ = "0.1.0"
