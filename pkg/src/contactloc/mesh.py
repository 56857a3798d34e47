"""Per-link surface meshes and the offline preprocessing behind the filter.

Each link carries a triangle mesh; preprocessing builds, for every face, a
fixed-length list of the K nearest faces by approximate geodesic distance
(shortest path on the face-adjacency graph, edge weight = centroid-to-centroid
Euclidean distance). The tables make the particle random walk an O(1) index
lookup at run time.
"""

from __future__ import annotations

import heapq
import io
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import FormatError, InputError, ValidationError
from .kinematics import ChainModel, forward_kinematics

_TABLE_MAGIC = b"MCPN"
_TABLE_VERSION = 1
_PAIR_DTYPE = np.dtype([("face", "<u4"), ("dist", "<f4")])


class Particle(NamedTuple):
    """A contact hypothesis: a face on a link. Tuple order gives the
    deterministic lexicographic tie-break."""

    link_index: int
    face_index: int


@dataclass(frozen=True)
class LinkSurface:
    """Triangle mesh of one link with per-face centroid, normal, and area.

    Vertices are in the link frame (meters). Normals are unit and oriented
    outward with respect to the vertex centroid of the mesh.
    """

    link_index: int
    vertices: np.ndarray
    faces: np.ndarray
    centroids: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    total_area: float
    area_cumsum: np.ndarray

    @classmethod
    def from_arrays(cls, link_index, vertices, faces, mask=None):
        vertices = np.asarray(vertices, dtype=float)
        faces = np.asarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3 or vertices.shape[0] < 3:
            raise InputError("vertices must be a (V,3) array with V >= 3")
        if faces.ndim != 2 or faces.shape[1] != 3 or faces.shape[0] < 1:
            raise FormatError("faces must be a (F,3) array of vertex triples")
        if faces.min() < 0 or faces.max() >= vertices.shape[0]:
            raise ValidationError("face references an out-of-range vertex")

        if mask is not None:
            mask = np.asarray(mask, dtype=np.int64)
            if mask.size and (mask.min() < 0 or mask.max() >= faces.shape[0]):
                raise InputError("mask lists a face index outside the mesh")
            keep = np.ones(faces.shape[0], dtype=bool)
            keep[mask] = False
            faces = faces[keep]
            if faces.shape[0] == 0:
                raise ValidationError("mask removed every face")

        _check_edge_manifold(faces)

        tri = vertices[faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norms = np.linalg.norm(cross, axis=1)
        if np.any(norms < 1e-14):
            bad = np.flatnonzero(norms < 1e-14)[:10].tolist()
            raise ValidationError(f"degenerate (zero-area) faces: {bad}")
        normals = cross / norms[:, None]
        centroids = tri.mean(axis=1)
        areas = 0.5 * norms

        interior = vertices.mean(axis=0)
        flip = np.einsum("ij,ij->i", normals, centroids - interior) < 0
        normals[flip] *= -1.0

        areas = np.ascontiguousarray(areas)
        return cls(
            link_index=int(link_index),
            vertices=vertices,
            faces=faces,
            centroids=centroids,
            normals=normals,
            areas=areas,
            total_area=float(areas.sum()),
            area_cumsum=np.cumsum(areas),
        )

    @property
    def face_count(self):
        return self.faces.shape[0]


def _check_edge_manifold(faces) -> None:
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges.sort(axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        uniq = np.unique(edges, axis=0)
        bad = uniq[counts > 2][:10].tolist()
        raise ValidationError(f"mesh is not edge-manifold, offending edges: {bad}")


def load_face_mask(path) -> np.ndarray:
    """Read a face-mask file: one face index per line, '#' starts a comment."""
    indices = []
    with io.open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                indices.append(int(text))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not a face index: {text!r}") from None
    return np.unique(np.array(indices, dtype=np.int64)) if indices else np.empty(0, dtype=np.int64)


def load_obj(path):
    """Parse a triangles-only Wavefront OBJ file into (vertices, faces)."""
    verts = []
    faces = []
    with io.open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise FormatError(
                        f"{path}:{lineno}: face with {len(refs)} vertices, triangles only"
                    )
                idx = []
                for ref in refs:
                    head = ref.split("/", 1)[0]
                    value = int(head)
                    if value <= 0:
                        raise FormatError(f"{path}:{lineno}: vertex references must be positive")
                    idx.append(value - 1)
                faces.append(idx)
            # vn/vt/o/g/s/usemtl/mtllib lines are ignored
    if not verts or not faces:
        raise FormatError(f"{path}: no triangle mesh found")
    return np.array(verts, dtype=float), np.array(faces, dtype=np.int64)


def load_surface(mesh_file, link_index: int, mask_file=None) -> LinkSurface:
    """Load one link surface from an OBJ file, optionally dropping masked faces."""
    vertices, faces = load_obj(mesh_file)
    mask = load_face_mask(mask_file) if mask_file is not None else None
    return LinkSurface.from_arrays(link_index, vertices, faces, mask=mask)


# ---------------------------------------------------------------------------
# Geodesic neighbor tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeighborTable:
    """Per-face nearest faces sorted by approximate geodesic distance.

    Row ``f`` lists K faces starting with ``f`` itself at distance zero;
    distances are non-decreasing within a row.
    """

    face_ids: np.ndarray  # (F, K) int32
    distances: np.ndarray  # (F, K) float64

    @property
    def k(self):
        return self.face_ids.shape[1]

    @property
    def face_count(self):
        return self.face_ids.shape[0]


def _face_adjacency(surface: LinkSurface):
    """CSR-style adjacency over vertex-sharing faces with centroid distances.

    Vertex-sharing (not just edge-sharing) neighbors keep the shortest-path
    metric close to the true surface geodesic; a purely edge-sharing graph is
    a honeycomb lattice whose paths overshoot by up to a third.
    """
    faces = surface.faces
    vertex_faces = {}
    for f in range(faces.shape[0]):
        for v in faces[f]:
            vertex_faces.setdefault(int(v), []).append(f)
    pairs = set()
    for group in vertex_faces.values():
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                a, b = group[i], group[j]
                pairs.add((a, b) if a < b else (b, a))
    if not pairs:
        raise ValidationError("mesh has no adjacent faces, cannot build adjacency")
    pair_arr = np.array(sorted(pairs), dtype=np.int64)
    w = np.linalg.norm(surface.centroids[pair_arr[:, 0]] - surface.centroids[pair_arr[:, 1]], axis=1)

    count = faces.shape[0]
    deg = np.zeros(count, dtype=np.int64)
    np.add.at(deg, pair_arr[:, 0], 1)
    np.add.at(deg, pair_arr[:, 1], 1)
    offsets = np.zeros(count + 1, dtype=np.int64)
    np.cumsum(deg, out=offsets[1:])
    nbr = np.empty(offsets[-1], dtype=np.int64)
    wgt = np.empty(offsets[-1], dtype=float)
    cursor = offsets[:-1].copy()
    for (fa, fb), dist in zip(pair_arr, w):
        nbr[cursor[fa]] = fb
        wgt[cursor[fa]] = dist
        cursor[fa] += 1
        nbr[cursor[fb]] = fa
        wgt[cursor[fb]] = dist
        cursor[fb] += 1
    return offsets, nbr, wgt


def build_neighbor_table(surface: LinkSurface, k: int) -> NeighborTable:
    """Dijkstra from every face over the adjacency graph, truncated to K hits."""
    count = surface.face_count
    if not 1 <= k <= count:
        raise InputError(f"K must be in [1, {count}], got {k}")
    offsets, nbr, wgt = _face_adjacency(surface)

    # connectivity check from face 0
    seen = np.zeros(count, dtype=bool)
    stack = [0]
    seen[0] = True
    reached = 1
    while stack:
        f = stack.pop()
        for j in range(offsets[f], offsets[f + 1]):
            other = nbr[j]
            if not seen[other]:
                seen[other] = True
                reached += 1
                stack.append(other)
    if reached != count:
        raise ValidationError(
            f"surface has {count - reached} faces disconnected from face 0"
        )

    face_ids = np.empty((count, k), dtype=np.int32)
    dists = np.empty((count, k), dtype=float)
    best = np.full(count, np.inf)
    stamp = np.full(count, -1, dtype=np.int64)
    offs = offsets.tolist()
    nbr_l = nbr.tolist()
    wgt_l = wgt.tolist()
    for src in range(count):
        heap = [(0.0, src)]
        best[src] = 0.0
        stamp[src] = src
        found = 0
        pop = heapq.heappop
        push = heapq.heappush
        while heap and found < k:
            d, f = pop(heap)
            if stamp[f] == src and d > best[f]:
                continue
            face_ids[src, found] = f
            dists[src, found] = d
            found += 1
            for j in range(offs[f], offs[f + 1]):
                other = nbr_l[j]
                nd = d + wgt_l[j]
                if stamp[other] != src or nd < best[other]:
                    stamp[other] = src
                    best[other] = nd
                    push(heap, (nd, other))
        if found < k:
            raise ValidationError(f"face {src} reaches only {found} faces, K={k}")
    return NeighborTable(face_ids, dists)


def save_neighbor_table(path, table: NeighborTable) -> None:
    """Write the binary table: magic, version u16, face_count u32, K u32,
    then face_count rows of K (face u32, distance f32) little-endian pairs."""
    rows = np.empty(table.face_ids.shape, dtype=_PAIR_DTYPE)
    rows["face"] = table.face_ids
    rows["dist"] = table.distances.astype("<f4")
    with io.open(path, "wb") as handle:
        handle.write(_TABLE_MAGIC)
        handle.write(struct.pack("<H", _TABLE_VERSION))
        handle.write(struct.pack("<I", table.face_count))
        handle.write(struct.pack("<I", table.k))
        handle.write(rows.tobytes())


def load_neighbor_table(path) -> NeighborTable:
    """Read and validate a binary neighbor table."""
    with io.open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < 14 or blob[:4] != _TABLE_MAGIC:
        raise FormatError(f"{path}: not a neighbor-table file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _TABLE_VERSION:
        raise FormatError(f"{path}: unsupported table version {version}")
    face_count, k = struct.unpack_from("<II", blob, 6)
    expected = 14 + face_count * k * _PAIR_DTYPE.itemsize
    if len(blob) != expected:
        raise FormatError(f"{path}: size {len(blob)} does not match header ({expected})")
    rows = np.frombuffer(blob, dtype=_PAIR_DTYPE, offset=14).reshape(face_count, k)
    face_ids = rows["face"].astype(np.int32)
    dists = rows["dist"].astype(float)
    if face_count and (face_ids.min() < 0 or face_ids.max() >= face_count):
        raise ValidationError(f"{path}: table references an out-of-range face")
    if np.any(np.diff(dists, axis=1) < 0):
        raise ValidationError(f"{path}: distances not ascending within a row")
    if np.any(dists[:, 0] != 0.0) or np.any(face_ids[:, 0] != np.arange(face_count)):
        raise ValidationError(f"{path}: row 0 entries must be the face itself at distance 0")
    return NeighborTable(face_ids, dists)


# ---------------------------------------------------------------------------
# Particles on surfaces
# ---------------------------------------------------------------------------


def check_surfaces(chain: ChainModel, surfaces: Sequence[LinkSurface]) -> None:
    if len(surfaces) != chain.n:
        raise InputError(f"expected {chain.n} link surfaces, got {len(surfaces)}")
    for i, s in enumerate(surfaces):
        if s.link_index != i:
            raise InputError(f"surface at position {i} has link_index {s.link_index}")


def particle_to_world(chain: ChainModel, q, surfaces: Sequence[LinkSurface], particle: Particle):
    """World-frame centroid and outward normal of a particle's face."""
    link, face = particle
    if not 0 <= link < len(surfaces):
        raise InputError(f"particle link {link} out of range")
    surface = surfaces[link]
    if not 0 <= face < surface.face_count:
        raise InputError(f"particle face {face} out of range for link {link}")
    frames = forward_kinematics(chain, q)
    rot = frames.rotations[link]
    point = rot @ surface.centroids[face] + frames.origins[link]
    normal = rot @ surface.normals[face]
    return point, normal


def sample_faces(surface: LinkSurface, rng, size: Optional[int] = None):
    """Area-weighted face draw within one surface."""
    u = rng.random(size) * surface.total_area
    return np.minimum(
        np.searchsorted(surface.area_cumsum, u, side="right"), surface.face_count - 1
    )


def random_particle(surfaces: Sequence[LinkSurface], rng) -> Particle:
    """Draw a particle with link probability proportional to link area and
    face probability proportional to face area."""
    if not surfaces:
        raise InputError("no surfaces loaded")
    totals = np.array([s.total_area for s in surfaces])
    cum = np.cumsum(totals)
    pos = int(np.minimum(np.searchsorted(cum, rng.random() * cum[-1], side="right"), len(surfaces) - 1))
    face = int(sample_faces(surfaces[pos], rng))
    return Particle(surfaces[pos].link_index, face)


def sample_particles(surfaces: Sequence[LinkSurface], rng, size: int):
    """Vectorized area-weighted draw of many particles, link and face arrays."""
    totals = np.array([s.total_area for s in surfaces])
    cum = np.cumsum(totals)
    positions = np.minimum(
        np.searchsorted(cum, rng.random(size) * cum[-1], side="right"), len(surfaces) - 1
    )
    link_ids = np.array([s.link_index for s in surfaces], dtype=np.int32)
    links = link_ids[positions]
    faces = np.empty(size, dtype=np.int32)
    for pos in np.unique(positions):
        sel = positions == pos
        faces[sel] = sample_faces(surfaces[pos], rng, int(sel.sum()))
    return links, faces
