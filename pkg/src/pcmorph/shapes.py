"""Procedural test shapes: spheres and cubes as clouds or meshes."""

from __future__ import annotations

import numpy as np

from .geom import PointCloud, TriMesh, sample_points


def fibonacci_sphere(n: int) -> PointCloud:
    """``n`` near-uniform points on the unit sphere (golden-angle spiral)."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * k
    return PointCloud(np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1))


def uv_sphere(rings: int = 8, segments: int = 12) -> TriMesh:
    """Latitude/longitude sphere with two poles; ``rings * segments + 2`` vertices."""
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, rings + 1):
        phi = np.pi * i / (rings + 1)
        for j in range(segments):
            th = 2.0 * np.pi * j / segments
            verts.append((np.sin(phi) * np.cos(th), np.sin(phi) * np.sin(th), np.cos(phi)))
    verts.append((0.0, 0.0, -1.0))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + i * segments + j % segments

    faces = []
    for j in range(segments):
        faces.append((0, ring(0, j), ring(0, j + 1)))
    for i in range(rings - 1):
        for j in range(segments):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    for j in range(segments):
        faces.append((south, ring(rings - 1, j + 1), ring(rings - 1, j)))
    return TriMesh(np.array(verts), np.array(faces))


def cube_mesh(half: float = 1.0) -> TriMesh:
    """Axis-aligned cube centered at the origin, 8 vertices and 12 triangles."""
    v = np.array([(x, y, z) for x in (-half, half) for y in (-half, half) for z in (-half, half)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [(a, b, c) for a, b, c, d in quads] + [(a, c, d) for a, b, c, d in quads]
    return TriMesh(v, np.array(faces))


def cube_surface(n: int, seed: int = 0) -> PointCloud:
    """Corners plus area-weighted samples over the faces of a unit cube."""
    return sample_points(cube_mesh(), n, seed)[0]
