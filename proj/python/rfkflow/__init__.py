"""Python bindings for the rfk alignment library.

Images are float arrays in [0, 1] of shape (H, W) or (H, W, 3). A flow is an
(H, W, 2) array on the target grid holding the (x, y) source location each
target pixel samples, with an optional (H, W) boolean validity mask.
"""

from ._core import (
    DegenerateError,
    Error,
    FormatError,
    InvalidArgument,
    aee,
    align,
    config_hash,
    config_text,
    correlation_volume,
    default_config,
    dense_descriptors,
    fl_all,
    read_features,
    read_flo,
    read_image,
    ransac_homography,
    refine,
    ssim_map,
    total_loss,
    warp_by_homography,
    write_features,
    write_flo,
    write_png,
)

__all__ = [name for name in dir() if not name.startswith("_")]
