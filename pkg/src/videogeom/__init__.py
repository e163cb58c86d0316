"""Video geometry estimation at desk scale.

Chunk-masked attention with KV caching (one model, offline/streaming/chunked
inference), a toy point-map/depth/normal network, scale-aligned losses,
Poisson-based pseudo-label refinement and the usual depth/point/normal metrics.
"""
__version__ = "0.1.0"
