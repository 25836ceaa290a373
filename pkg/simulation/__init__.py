"""
Lens Probe Toolkit - numerical processing package
Geodesic lens data, hyperbolic DN-map simulation and coherent-state probing
"""

__version__ = "0.1.0"
