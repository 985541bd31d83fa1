# __init__.py
"""
Incremental RGB-D mapping: TSDF voxel fusion, probabilistic instance association with
open-vocabulary embeddings, and a CPU Gaussian-splatting field with analytic gradients.
"""

# read version from installed package
from importlib.metadata import version
__version__ = version("splatvox_pkg")

# import all functions
from .errors import *
from .geometry import *
from .scene_io import *
from .synthetic import *
from .voxel_grid import *
from .instance_fusion import *
from .splat_render import *
from .gaussian_field import *
from .eval_metrics import *
from .config import *
from .pipeline import *
from .analysis import *
