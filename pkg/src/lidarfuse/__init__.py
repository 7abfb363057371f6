"""LiDAR odometry with geometric and learned branches, feature fusion and a loop-closing back end."""

__version__ = "0.1.0"

from .geometry import DualQuaternion, Pose, Twist, se3_exp, se3_log  # noqa: E402
from .pointcloud import PointCloud, ScanSequence  # noqa: E402

__all__ = ["DualQuaternion", "PointCloud", "Pose", "ScanSequence", "Twist", "se3_exp", "se3_log", "__version__"]
