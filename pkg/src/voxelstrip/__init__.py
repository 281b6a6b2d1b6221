"""voxelstrip: brain extraction for head MRI with a 3D residual U-Net."""
from .errors import VoxelstripError
from .kernels import BACKEND
from .volume_io import BrainMask, Volume, read_nifti, write_nifti

__version__ = "0.1.0"

__all__ = ["BACKEND", "BrainMask", "Volume", "VoxelstripError", "read_nifti", "write_nifti",
           "__version__"]
