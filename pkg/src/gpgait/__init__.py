"""Pose-based gait recognition at desk scale: unified skeleton
normalization, geometric descriptors, a part-aware graph network, and
gallery/probe retrieval evaluation."""

__version__ = "0.1.0"
