"""Reference-based video super-resolution for triple-camera footage.

A numpy implementation of a bidirectional recurrent network that
super-resolves an ultra-wide video 4x with guidance from wide-angle and
telephoto videos, together with its training objectives, a synthetic
triple-camera data generator and the evaluation protocol.
"""

__version__ = "0.1.0"
