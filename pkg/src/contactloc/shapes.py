"""Parametric synthetic triangle meshes with near-uniform face sizes.

Link bodies are closed cylinders whose caps are triangulated with concentric
rings (6k vertices on ring k), which keeps cap triangles close to equilateral
and the whole mesh edge-manifold and watertight.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InputError


def _ring(radius: float, count: int, z: float, phase: float = 0.0) -> np.ndarray:
    ang = phase + 2.0 * np.pi * np.arange(count) / count
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(count, z)], axis=1)


def _cap_faces(ring_ids):
    """Triangulate between concentric rings; ring_ids[k] has 6k ids (1 for k=0)."""
    faces = []
    for k in range(len(ring_ids) - 1):
        inner = ring_ids[k]
        outer = ring_ids[k + 1]
        if k == 0:
            c = inner[0]
            m = len(outer)
            for j in range(m):
                faces.append((outer[j], outer[(j + 1) % m], c))
            continue
        ni, no = len(inner), len(outer)
        for s in range(6):
            for j in range(k + 1):
                o_a = outer[(s * (k + 1) + j) % no]
                o_b = outer[(s * (k + 1) + j + 1) % no]
                faces.append((o_a, o_b, inner[(s * k + j) % ni]))
            for j in range(k):
                faces.append(
                    (
                        outer[(s * (k + 1) + j + 1) % no],
                        inner[(s * k + j + 1) % ni],
                        inner[(s * k + j) % ni],
                    )
                )
    return faces


def cylinder_link(radius: float, length: float, edge: float = 0.0078):
    """Closed cylinder along +z from z=0 to z=length.

    ``edge`` sets the target triangle edge length; the returned faces stay
    within a small area ratio of each other across caps and shaft.
    """
    if radius <= 0 or length <= 0 or edge <= 0:
        raise InputError("cylinder_link: radius, length, edge must be positive")
    row_step = edge * math.sqrt(3.0) / 2.0
    cap_rings = max(1, round(radius / row_step))
    n_rows = max(1, round(length / row_step))
    boundary = 6 * cap_rings

    verts = []

    def add(points):
        start = len(verts)
        verts.extend(points)
        return np.arange(start, start + len(points))

    # bottom cap interior rings (center .. cap_rings-1)
    bottom_rings = [add([np.array([0.0, 0.0, 0.0])])]
    for k in range(1, cap_rings):
        bottom_rings.append(add(_ring(radius * k / cap_rings, 6 * k, 0.0)))

    # shaft rows 0..n_rows; row 0 doubles as the bottom boundary ring
    rows = []
    for r in range(n_rows + 1):
        rows.append(add(_ring(radius, boundary, length * r / n_rows)))
    bottom_rings.append(rows[0])

    # top cap interior rings
    top_rings = [add([np.array([0.0, 0.0, length])])]
    for k in range(1, cap_rings):
        top_rings.append(add(_ring(radius * k / cap_rings, 6 * k, length)))
    top_rings.append(rows[-1])

    faces = _cap_faces(bottom_rings)
    faces.extend(_cap_faces(top_rings))
    for r in range(n_rows):
        lo, hi = rows[r], rows[r + 1]
        for i in range(boundary):
            j = (i + 1) % boundary
            faces.append((lo[i], lo[j], hi[j]))
            faces.append((lo[i], hi[j], hi[i]))

    return np.array(verts), np.array(faces, dtype=np.int64)


_ICO_T = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
        (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
        (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
    ],
    dtype=float,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def icosphere(subdivisions: int = 2, radius: float = 1.0):
    """Subdivided icosahedron projected onto a sphere (20 * 4^s faces)."""
    if subdivisions < 0:
        raise InputError("icosphere: subdivisions must be >= 0")
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(subdivisions):
        midpoint = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                v = verts[a] + verts[b]
                verts.append(v / np.linalg.norm(v))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return radius * np.array(verts), np.array(faces, dtype=np.int64)


def cube(size: float = 1.0):
    """Axis-aligned cube centered at the origin, 12 triangles."""
    h = size / 2.0
    verts = np.array(
        [
            (-h, -h, -h), (h, -h, -h), (h, h, -h), (-h, h, -h),
            (-h, -h, h), (h, -h, h), (h, h, h), (-h, h, h),
        ]
    )
    faces = np.array(
        [
            (0, 2, 1), (0, 3, 2),  # bottom
            (4, 5, 6), (4, 6, 7),  # top
            (0, 1, 5), (0, 5, 4),  # -y
            (2, 3, 7), (2, 7, 6),  # +y
            (1, 2, 6), (1, 6, 5),  # +x
            (3, 0, 4), (3, 4, 7),  # -x
        ],
        dtype=np.int64,
    )
    return verts, faces


def save_obj(path, vertices, faces) -> None:
    """Write a triangles-only Wavefront OBJ file."""
    with open(path, "w", encoding="utf-8") as handle:
        for v in vertices:
            handle.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in faces:
            handle.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
