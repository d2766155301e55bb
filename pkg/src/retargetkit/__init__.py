"""Physics-aware motion retargeting toolkit.

Jointly optimizes retargeting parameters (projected gradient) and a
reference-tracking control policy (PPO in a built-in rigid-body simulator),
then audits the exported motion with kinematic quality metrics.
"""

__version__ = "0.1.0"

from .estimator import MotionRetargeter

__all__ = ["MotionRetargeter", "__version__"]
