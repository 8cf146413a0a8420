"""Unsupervised instance segmentation of depth images of identical objects.

A 3D-aware GAN learns to render bins of n identical instances from n
latent vectors; an encoder inverts it, and test-time segmentation renders
each recovered instance alone and Z-buffers the renders.
"""

__version__ = "0.1.0"
