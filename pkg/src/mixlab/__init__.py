"""mixlab: mixed-sample augmentation, intrinsic dimension and occlusion-robustness analysis."""

__version__ = "0.1.0"

from .data_io import Dataset, PointCloud, TensorFile  # noqa: E402
from .errors import MixlabError  # noqa: E402

__all__ = ["Dataset", "PointCloud", "TensorFile", "MixlabError", "__version__"]
