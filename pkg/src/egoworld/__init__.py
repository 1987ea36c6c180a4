"""Viewpoint-disentangled joint state representations from synchronized
egocentric / fixed-camera video, with downstream single-demonstration
imitation learning in a deterministic gridworld."""

__version__ = "0.1.0"
