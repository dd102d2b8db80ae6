from .dataset import ImageSample, load_split, make_dataset, make_sample, read_manifest
from .formats import (
    load_image, load_voxels, load_voxels_float, save_image, save_voxels, save_voxels_float,
)
from .render import View, depth_map, render_ortho
from .shapes import PRIMITIVES, ShapeSpec, gen_shape

__all__ = [
    "ImageSample", "PRIMITIVES", "ShapeSpec", "View", "depth_map", "gen_shape", "load_image",
    "load_split", "load_voxels", "load_voxels_float", "make_dataset", "make_sample",
    "read_manifest", "render_ortho", "save_image", "save_voxels", "save_voxels_float",
]
