"""Interactive 3D object selection in plane-structured voxel volumes.

Pipeline: per-voxel feature embedding from multi-view images and the
volume itself, a small MLP classifier trained from 2D scribbles lifted
to 3D, and an exact graph-cut refinement, plus rendering of the
selected object into novel views.
"""

__version__ = "0.1.0"
