"""Sparse-octree SDF mapping with binary composition embeddings.

A mapping engine that reconstructs signed-distance maps of 3D environments
from posed range scans. Features live at the corners of a multi-level,
Morton-coded sparse voxel octree; in the compositional modes each corner
stores only a B-bit indicator vector that selects which shared component
vectors are summed into the corner's embedding. A shallow MLP decodes the
interpolated feature into a signed distance. Continuous and
softmax-indexed discrete baselines share the same octree and trainer so
quality/storage/speed can be compared on equal footing.
"""

__version__ = "0.1.0"
