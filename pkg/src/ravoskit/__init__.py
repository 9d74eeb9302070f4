"""Region-aware video object segmentation at desk scale.

Quadratic-motion object tracking, motion-path memory and regional top-k
memory matching over synthetic or DAVIS-layout videos.
"""
__version__ = "0.1.0"
