import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError
from scipy import sparse
from scipy.sparse import csgraph
from helper_modules.errors import FormatError, MeshError, ShapeMismatchError, StorageError

logger = logging.getLogger(__name__)

# Set the guard for degenerate normals and projected edges
EPS = 1e-12

# Set the minimum number of vertices of a valid mesh
MIN_VERTICES = 3

@dataclass(frozen=True)
class TupleSets:

    """
    The sets S_v of ordered neighbour pairs (u, v, w) around every vertex v, flattened.

    Tuples of vertex v occupy rows offsets[v]:offsets[v + 1] and are ordered by (u, w).
    `padded` is a (|V|, K) index into the flat arrays with `mask` marking real entries,
    K being the largest |S_v|.
    """

    center: np.ndarray
    incoming: np.ndarray
    outgoing: np.ndarray
    cosine: np.ndarray
    offsets: np.ndarray
    padded: np.ndarray
    mask: np.ndarray

    def sizes(self):
        return np.diff(self.offsets)

class TriMesh:

    """
    A triangle mesh with vertex positions and faces, plus the edge-graph structures derived from them.

    Attributes:
        positions (np.ndarray): (|V|, 3) float64 vertex coordinates.
        faces (np.ndarray): (|F|, 3) int64 vertex indices.
    """

    def __init__(self, positions, faces):

        """
        Validates and stores the mesh arrays.

        Args:
            positions (array_like): Vertex coordinates of shape (|V|, 3).
            faces (array_like): Triangles of shape (|F|, 3), 0-based.
        """

        positions = np.asarray(positions, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3) if len(faces) else np.zeros((0, 3), dtype=np.int64)

        if positions.ndim != 2 or positions.shape[1] != 3:
            raise MeshError(f'positions must have shape (n, 3), got {positions.shape}')
        if positions.shape[0] < MIN_VERTICES:
            raise MeshError(f'a mesh needs at least {MIN_VERTICES} vertices, got {positions.shape[0]}')
        if not np.isfinite(positions).all():
            raise MeshError('positions contain NaN or infinite coordinates')
        if faces.size and (faces.min() < 0 or faces.max() >= positions.shape[0]):
            raise MeshError(f'face index out of range for {positions.shape[0]} vertices')
        repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if repeated.any():
            raise MeshError(f'face {int(np.flatnonzero(repeated)[0])} repeats a vertex')

        self.positions = positions
        self.faces = faces

    @property
    def num_vertices(self):
        return self.positions.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    @cached_property
    def edges(self):

        """
        Undirected edge set E as a sorted (|E|, 2) array with u < v.
        """

        pairs = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        if not len(pairs):
            return np.zeros((0, 2), dtype=np.int64)
        return np.unique(pairs, axis=0)

    @cached_property
    def directed_edges(self):

        """
        Directed edge set with both orientations of every undirected edge.
        """

        return np.concatenate([self.edges, self.edges[:, ::-1]])

    @cached_property
    def adjacency(self):

        """
        Symmetric sparse adjacency weighted by Euclidean edge length.
        """

        directed = self.directed_edges
        lengths = np.linalg.norm(self.positions[directed[:, 0]] - self.positions[directed[:, 1]], axis=1)
        n = self.num_vertices
        return sparse.csr_matrix((lengths, (directed[:, 0], directed[:, 1])), shape=(n, n))

    @cached_property
    def neighbors(self):

        """
        Sorted neighbour index arrays, one per vertex.
        """

        directed = self.directed_edges
        order = np.lexsort((directed[:, 1], directed[:, 0]))
        directed = directed[order]
        splits = np.searchsorted(directed[:, 0], np.arange(1, self.num_vertices))
        return np.split(directed[:, 1], splits)

    @cached_property
    def normals(self):
        return vertex_normals(self)

    @cached_property
    def tuple_sets(self):
        return build_tuple_sets(self)

    def has_edge(self, u, v):
        return v in self.neighbors[u]

def triangle_cross_products(mesh):

    """
    Unnormalized face normals; their length is twice the triangle area.
    """

    p = mesh.positions
    f = mesh.faces
    return np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])

def surface_area(mesh):

    """
    Computes the total surface area of the mesh.

    Args:
        mesh (TriMesh): The mesh.

    Returns:
        float: Sum of triangle areas.
    """

    return float(0.5 * np.linalg.norm(triangle_cross_products(mesh), axis=1).sum())

def vertex_normals(mesh):

    """
    Area-weighted average of incident face normals, normalized. Vertices without faces get a zero normal.
    Orientation follows the stored face winding.

    Args:
        mesh (TriMesh): The mesh.

    Returns:
        np.ndarray: (|V|, 3) unit normals.
    """

    # cross products already carry the area weight
    cross = triangle_cross_products(mesh)
    normals = np.zeros_like(mesh.positions)
    for corner in range(3):
        np.add.at(normals, mesh.faces[:, corner], cross)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    return np.where(lengths > EPS, normals / np.where(lengths > EPS, lengths, 1.0), 0.0)

def tangential_cosines(positions, normals, incoming, center, outgoing):

    """
    Vectorized tangential cosine similarity C_v(u, w).

    u and w are projected onto the tangent plane of v; the result is the cosine between the
    incoming direction (v - u_proj) and the outgoing direction (w_proj - v), or 0 when either
    projected edge is shorter than EPS.

    Args:
        positions (np.ndarray): (|V|, 3) coordinates.
        normals (np.ndarray): (|V|, 3) unit or zero normals.
        incoming, center, outgoing (np.ndarray): Index arrays of equal length.

    Returns:
        np.ndarray: Cosines in [-1, 1].
    """

    n = normals[center]
    to_u = positions[incoming] - positions[center]
    to_w = positions[outgoing] - positions[center]
    to_u = to_u - np.sum(to_u * n, axis=1, keepdims=True) * n
    to_w = to_w - np.sum(to_w * n, axis=1, keepdims=True) * n
    len_u = np.linalg.norm(to_u, axis=1)
    len_w = np.linalg.norm(to_w, axis=1)
    valid = (len_u > EPS) & (len_w > EPS)
    denom = np.where(valid, len_u * len_w, 1.0)
    cosine = np.where(valid, np.sum(-to_u * to_w, axis=1) / denom, 0.0)
    return np.clip(cosine, -1.0, 1.0)

def tangential_cosine(mesh, u, v, w):

    """
    Tangential cosine similarity between the incoming edge (u, v) and the outgoing edge (v, w).

    Args:
        mesh (TriMesh): The mesh.
        u, v, w (int): Vertex indices with (u, v) and (v, w) mesh edges.

    Returns:
        float: Cosine in [-1, 1].
    """

    for a, b in ((u, v), (v, w)):
        if not mesh.has_edge(a, b):
            raise MeshError(f'vertices {a} and {b} are not adjacent')
    value = tangential_cosines(mesh.positions, mesh.normals, np.array([u]), np.array([v]), np.array([w]))
    return float(value[0])

def build_tuple_sets(mesh):

    """
    Builds S_v for every vertex: all ordered neighbour pairs (u, w), including u = w,
    together with their tangential cosines.

    Args:
        mesh (TriMesh): The mesh.

    Returns:
        TupleSets: Flat and padded tuple layout.
    """

    centers, incoming, outgoing = [], [], []
    sizes = np.zeros(mesh.num_vertices, dtype=np.int64)
    for v, nbrs in enumerate(mesh.neighbors):
        if not len(nbrs):
            continue
        u, w = np.meshgrid(nbrs, nbrs, indexing='ij')
        incoming.append(u.ravel())
        outgoing.append(w.ravel())
        centers.append(np.full(u.size, v, dtype=np.int64))
        sizes[v] = u.size

    if centers:
        center = np.concatenate(centers)
        incoming = np.concatenate(incoming)
        outgoing = np.concatenate(outgoing)
    else:
        center = incoming = outgoing = np.zeros(0, dtype=np.int64)
    cosine = tangential_cosines(mesh.positions, mesh.normals, incoming, center, outgoing)

    offsets = np.concatenate([[0], np.cumsum(sizes)])
    width = max(int(sizes.max()), 1)
    slots = np.arange(width)
    mask = slots[None, :] < sizes[:, None]
    padded = np.where(mask, offsets[:-1, None] + slots[None, :], 0)
    logger.debug('Built %d tuples, widest S_v has %d entries', center.size, width)
    return TupleSets(center, incoming, outgoing, cosine, offsets, padded, mask)

def geodesic_distances(mesh, sources):

    """
    Dijkstra shortest-path distances along the edge graph with Euclidean edge lengths.
    This approximates the surface geodesic from above.

    Args:
        mesh (TriMesh): The mesh.
        sources (array_like): Source vertex indices.

    Returns:
        np.ndarray: (len(sources), |V|) distances, +inf for unreachable vertices.
    """

    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if sources.size and (sources.min() < 0 or sources.max() >= mesh.num_vertices):
        raise MeshError(f'source vertex out of range for {mesh.num_vertices} vertices')
    return csgraph.dijkstra(mesh.adjacency, directed=False, indices=sources)

def geodesic_from(mesh, source):

    """
    Distances from a single source vertex to all vertices.

    Args:
        mesh (TriMesh): The mesh.
        source (int): Source vertex index.

    Returns:
        np.ndarray: |V| distances.
    """

    return geodesic_distances(mesh, [source])[0]

def connected_components(mesh, labeling):

    """
    Counts maximal edge-connected vertex sets of uniform label.

    Args:
        mesh (TriMesh): The mesh.
        labeling (array_like): One label per vertex.

    Returns:
        int: Number of components.
    """

    labeling = np.asarray(labeling)
    if labeling.shape != (mesh.num_vertices,):
        raise ShapeMismatchError(f'labeling has {labeling.size} entries, mesh has {mesh.num_vertices} vertices')
    edges = mesh.edges
    same = edges[labeling[edges[:, 0]] == labeling[edges[:, 1]]]
    n = mesh.num_vertices
    graph = sparse.csr_matrix((np.ones(len(same)), (same[:, 0], same[:, 1])), shape=(n, n))
    count, _ = csgraph.connected_components(graph, directed=False)
    return int(count)

def _fan(polygon):
    return [(polygon[0], polygon[i], polygon[i + 1]) for i in range(1, len(polygon) - 1)]

def _read_obj(path):
    vertices, faces, face_lines = [], [], []
    with open(path, 'r') as file:
        for number, line in enumerate(file, start=1):
            tokens = line.split('#', 1)[0].split()
            if not tokens:
                continue
            record = tokens[0]
            try:
                if record == 'v':
                    if len(tokens) < 4:
                        raise ValueError('vertex record needs three coordinates')
                    vertices.append([float(t) for t in tokens[1:4]])
                elif record == 'f':
                    if len(tokens) < 4:
                        raise ValueError('face record needs at least three vertices')
                    polygon = []
                    for token in tokens[1:]:
                        index = int(token.split('/')[0])
                        if index == 0:
                            raise ValueError('OBJ indices are 1-based')
                        polygon.append(index - 1 if index > 0 else len(vertices) + index)
                    for triangle in _fan(polygon):
                        faces.append(triangle)
                        face_lines.append(number)
            except ValueError as e:
                raise FormatError(f'{path}:{number}: unparseable {record!r} record: {e}')

    for triangle, number in zip(faces, face_lines):
        if min(triangle) < 0 or max(triangle) >= len(vertices):
            raise FormatError(f'{path}:{number}: face index out of range for {len(vertices)} vertices')
    if len(vertices) < MIN_VERTICES:
        raise FormatError(f'{path}: a mesh needs at least {MIN_VERTICES} vertices, got {len(vertices)}')
    return TriMesh(np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64))

def _read_plydata(path):
    try:
        return PlyData.read(str(path))
    except PlyParseError as e:
        raise FormatError(f'{path}: {e}')
    except (ValueError, EOFError) as e:
        raise FormatError(f'{path}: truncated or malformed PLY payload: {e}')

def _read_ply(path):
    data = _read_plydata(path)
    try:
        vertex = data['vertex'].data
        positions = np.column_stack([vertex['x'], vertex['y'], vertex['z']]).astype(np.float64)
    except (KeyError, ValueError) as e:
        raise FormatError(f'{path}: missing vertex coordinates ({e})')

    faces = []
    if 'face' in data:
        face_data = data['face'].data
        name = 'vertex_indices' if 'vertex_indices' in face_data.dtype.names else 'vertex_index'
        for row, polygon in enumerate(face_data[name]):
            polygon = [int(i) for i in polygon]
            if len(polygon) < 3:
                raise FormatError(f'{path}: face element {row} has fewer than three vertices')
            if min(polygon) < 0 or max(polygon) >= len(positions):
                raise FormatError(f'{path}: face element {row} index out of range for {len(positions)} vertices')
            faces.extend(_fan(polygon))
    if len(positions) < MIN_VERTICES:
        raise FormatError(f'{path}: a mesh needs at least {MIN_VERTICES} vertices, got {len(positions)}')
    return TriMesh(positions, np.array(faces, dtype=np.int64))

def load_mesh(path):

    """
    Reads an OBJ (ASCII) or PLY (ASCII or binary little-endian) mesh. Polygon faces are fan-triangulated.

    Args:
        path (str | Path): File path; the suffix selects the reader.

    Returns:
        TriMesh: The validated mesh.
    """

    path = Path(path)
    if not path.exists():
        raise StorageError(f'mesh file not found: {path}')
    suffix = path.suffix.lower()
    if suffix == '.obj':
        mesh = _read_obj(path)
    elif suffix == '.ply':
        mesh = _read_ply(path)
    else:
        raise FormatError(f'{path}: unsupported mesh format {suffix!r}')
    logger.debug('Loaded %s: %d vertices, %d faces', path, mesh.num_vertices, mesh.num_faces)
    return mesh

def load_colors(path):

    """
    Reads per-vertex uchar RGB colors from a PLY file.

    Returns:
        np.ndarray | None: (|V|, 3) uint8 colors, or None when the file has no color properties.
    """

    vertex = _read_plydata(path)['vertex'].data
    if not all(channel in vertex.dtype.names for channel in ('red', 'green', 'blue')):
        return None
    return np.column_stack([vertex['red'], vertex['green'], vertex['blue']]).astype(np.uint8)

def save_mesh(path, mesh, colors=None, binary=True):

    """
    Writes a mesh as PLY (float64 positions, optional uchar RGB) or OBJ, chosen by suffix.

    Args:
        path (str | Path): Output path.
        mesh (TriMesh): The mesh.
        colors (np.ndarray | None): Optional (|V|, 3) uint8 colors, PLY only.
        binary (bool): Binary little-endian PLY when True, ASCII otherwise.
    """

    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == '.ply':
            fields = [('x', 'f8'), ('y', 'f8'), ('z', 'f8')]
            if colors is not None:
                colors = np.asarray(colors, dtype=np.uint8)
                if colors.shape != (mesh.num_vertices, 3):
                    raise ShapeMismatchError(f'colors must have shape ({mesh.num_vertices}, 3), got {colors.shape}')
                fields += [('red', 'u1'), ('green', 'u1'), ('blue', 'u1')]
            vertex = np.empty(mesh.num_vertices, dtype=fields)
            vertex['x'], vertex['y'], vertex['z'] = mesh.positions.T
            if colors is not None:
                vertex['red'], vertex['green'], vertex['blue'] = colors.T
            face = np.empty(mesh.num_faces, dtype=[('vertex_indices', 'i4', (3,))])
            face['vertex_indices'] = mesh.faces
            elements = [
                PlyElement.describe(vertex, 'vertex'),
                PlyElement.describe(face, 'face', len_types={'vertex_indices': 'u1'}, val_types={'vertex_indices': 'i4'}),
            ]
            PlyData(elements, text=not binary, byte_order='<').write(str(path))
        elif suffix == '.obj':
            with open(path, 'w') as file:
                for x, y, z in mesh.positions:
                    file.write('v %.17g %.17g %.17g\n' % (x, y, z))
                for a, b, c in mesh.faces + 1:
                    file.write(f'f {a} {b} {c}\n')
        else:
            raise FormatError(f'{path}: unsupported mesh format {suffix!r}')
    except OSError as e:
        raise StorageError(f'cannot write mesh {path}: {e}')
