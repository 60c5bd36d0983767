"""sketchforge-service: model oracle for sketch-conditioned 3D generation."""

__version__ = "0.1.0"
