"""2D graph SLAM for very sparse range sensing.

Frontend: a landmark graph over robot poses and polar-line features built
from multiscans, optimized per scan with a chi-squared consistency gate.
Backend: a pose graph closed by correlative scan-to-map matching against
frozen occupancy submaps, using a max-kernel score and a DCS robust kernel.
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
