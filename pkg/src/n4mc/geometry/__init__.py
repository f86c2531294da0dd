from .bvh import BVH, build_bvh, closest_on_triangle

__all__ = ["BVH", "build_bvh", "closest_on_triangle"]
