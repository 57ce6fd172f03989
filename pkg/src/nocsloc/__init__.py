"""Monocular object localization from rendered normalized object coordinates."""

from .geometry import Box3D, CameraIntrinsics, ObjectSize, Pose4DoF, Ray

__version__ = "0.1.0"

__all__ = ["Box3D", "CameraIntrinsics", "ObjectSize", "Pose4DoF", "Ray", "__version__"]
