"""sketchforge: sketch- and text-conditioned 3D generation on a voxel
radiance field, driven by a diffusion prior through score distillation."""

__version__ = "0.1.0"
