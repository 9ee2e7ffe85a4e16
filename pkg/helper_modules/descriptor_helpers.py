import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from helper_modules.errors import FormatError, ShapeMismatchError, StorageError, ValidationError
from helper_modules.mesh_helpers import TriMesh
from helper_modules.numkernel import EPS, row_l2_normalize

logger = logging.getLogger(__name__)

# Set the descriptor file header: magic, u32 version, u64 |V|, u64 d
DESCRIPTOR_MAGIC = b'SDF1'
DESCRIPTOR_VERSION = 1
DESCRIPTOR_HEADER = struct.Struct('<4sIQQ')

# Set the chirality vector file header: magic, u32 version, u64 n
CHIRALITY_MAGIC = b'SCV1'
CHIRALITY_VERSION = 1
CHIRALITY_HEADER = struct.Struct('<4sIQ')

# Set the sentinel for vertices without a symmetric counterpart annotation
NO_COUNTERPART = -1

# Set the smallest descriptor width the synthetic generator supports
MIN_SYNTHETIC_DIM = 8

# Set the half length of the synthetic tube along y
TUBE_HALF_LENGTH = 1.5

# Set the steepness of the planted chirality coordinate tanh(k * x)
CHIRALITY_STEEPNESS = 4.0

@dataclass
class DescriptorField:

    """
    Per-vertex descriptors F and their flipped counterparts F-bar.

    Attributes:
        values (np.ndarray): (|V|, d) float64 descriptors.
        flipped (np.ndarray): (|V|, d) float64 flipped descriptors.
    """

    values: np.ndarray
    flipped: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.flipped = np.asarray(self.flipped, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape != self.flipped.shape:
            raise ShapeMismatchError(f'descriptor shapes differ: {self.values.shape} vs {self.flipped.shape}')
        if self.values.shape[1] == 0:
            raise ValidationError('descriptor dimension must be at least 1')
        if not (np.isfinite(self.values).all() and np.isfinite(self.flipped).all()):
            raise ValidationError('descriptors contain NaN or infinite entries')

    @property
    def num_vertices(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

@dataclass
class GroundTruth:

    """
    Per-shape annotations.

    Attributes:
        sym_map (np.ndarray): Index of each vertex's intrinsic symmetric counterpart, or NO_COUNTERPART.
        lr_labels (np.ndarray): Left/right label of each vertex in {-1, +1}.
        correspondence (np.ndarray | None): Index of each vertex on a shared template, for inter-shape matching.
    """

    sym_map: np.ndarray
    lr_labels: np.ndarray
    correspondence: np.ndarray = None

    def __post_init__(self):
        self.sym_map = np.asarray(self.sym_map, dtype=np.int64)
        self.lr_labels = np.asarray(self.lr_labels, dtype=np.int64)
        n = self.sym_map.size
        if self.lr_labels.shape != (n,):
            raise ShapeMismatchError(f'{self.lr_labels.size} left/right labels for {n} vertices')
        if n and (self.sym_map.min() < NO_COUNTERPART or self.sym_map.max() >= n):
            raise ValidationError('symmetric counterpart index out of range')
        if not np.isin(self.lr_labels, (-1, 1)).all():
            raise ValidationError('left/right labels must be -1 or +1')
        if self.correspondence is not None:
            self.correspondence = np.asarray(self.correspondence, dtype=np.int64)
            if self.correspondence.shape != (n,) or (n and self.correspondence.min() < 0):
                raise ValidationError('template correspondence must hold one non-negative index per vertex')

    @property
    def num_vertices(self):
        return self.sym_map.size

    def annotated(self):

        """
        Boolean mask of vertices with a counterpart annotation.
        """

        return self.sym_map != NO_COUNTERPART

    def involution_violations(self):

        """
        Counts annotated vertices v whose counterpart is annotated but does not map back to v.
        """

        both = np.flatnonzero(self.annotated())
        both = both[self.sym_map[self.sym_map[both]] != NO_COUNTERPART]
        return int(np.count_nonzero(self.sym_map[self.sym_map[both]] != both))

def _read_bytes(path, what):
    path = Path(path)
    if not path.exists():
        raise StorageError(f'{what} file not found: {path}')
    try:
        return path.read_bytes()
    except OSError as e:
        raise StorageError(f'cannot read {what} file {path}: {e}')

def _write_bytes(path, payload, what):
    try:
        Path(path).write_bytes(payload)
    except OSError as e:
        raise StorageError(f'cannot write {what} file {path}: {e}')

def save_descriptors(path, field):

    """
    Writes a descriptor field in the SDF1 format (float32 row-major F, then F-bar).

    Args:
        path (str | Path): Output path.
        field (DescriptorField): The descriptors.
    """

    header = DESCRIPTOR_HEADER.pack(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION, field.num_vertices, field.dim)
    payload = field.values.astype('<f4').tobytes() + field.flipped.astype('<f4').tobytes()
    _write_bytes(path, header + payload, 'descriptor')

def load_descriptors(path):

    """
    Reads an SDF1 descriptor file; values are promoted to float64.

    Args:
        path (str | Path): Input path.

    Returns:
        DescriptorField: The descriptors.
    """

    data = _read_bytes(path, 'descriptor')
    if len(data) < DESCRIPTOR_HEADER.size:
        raise FormatError(f'{path}: truncated header at byte offset {len(data)}')
    magic, version, rows, dim = DESCRIPTOR_HEADER.unpack_from(data)
    if magic != DESCRIPTOR_MAGIC:
        raise FormatError(f'{path}: bad magic {magic!r} at byte offset 0')
    if version != DESCRIPTOR_VERSION:
        raise FormatError(f'{path}: unsupported version {version} at byte offset 4')
    if dim == 0:
        raise FormatError(f'{path}: descriptor dimension 0 at byte offset 16')
    if rows == 0:
        raise FormatError(f'{path}: vertex count 0 at byte offset 8')

    count = rows * dim
    expected = DESCRIPTOR_HEADER.size + 2 * count * 4
    if len(data) < expected:
        raise FormatError(f'{path}: truncated payload, expected {expected} bytes, file ends at byte offset {len(data)}')
    if len(data) > expected:
        raise FormatError(f'{path}: trailing data after byte offset {expected}')

    floats = np.frombuffer(data, dtype='<f4', count=2 * count, offset=DESCRIPTOR_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(floats))
    if bad.size:
        raise FormatError(f'{path}: non-finite value at byte offset {DESCRIPTOR_HEADER.size + 4 * int(bad[0])}')
    floats = floats.astype(np.float64)
    return DescriptorField(floats[:count].reshape(rows, dim), floats[count:].reshape(rows, dim))

def normalize(field):

    """
    Row-wise unit normalization of both descriptor matrices.

    Args:
        field (DescriptorField): The descriptors.

    Returns:
        DescriptorField: The normalized descriptors.
    """

    values = row_l2_normalize(torch.from_numpy(field.values), EPS).numpy()
    flipped = row_l2_normalize(torch.from_numpy(field.flipped), EPS).numpy()
    return DescriptorField(values, flipped)

def save_chirality(path, chi):

    """
    Writes a per-vertex scalar field as an SCV1 float32 vector file.
    """

    chi = np.asarray(chi, dtype=np.float64).ravel()
    header = CHIRALITY_HEADER.pack(CHIRALITY_MAGIC, CHIRALITY_VERSION, chi.size)
    _write_bytes(path, header + chi.astype('<f4').tobytes(), 'chirality')

def load_chirality(path):

    """
    Reads an SCV1 vector file.

    Returns:
        np.ndarray: float64 values.
    """

    data = _read_bytes(path, 'chirality')
    if len(data) < CHIRALITY_HEADER.size:
        raise FormatError(f'{path}: truncated header at byte offset {len(data)}')
    magic, version, count = CHIRALITY_HEADER.unpack_from(data)
    if magic != CHIRALITY_MAGIC:
        raise FormatError(f'{path}: bad magic {magic!r} at byte offset 0')
    if version != CHIRALITY_VERSION:
        raise FormatError(f'{path}: unsupported version {version} at byte offset 4')
    expected = CHIRALITY_HEADER.size + 4 * count
    if len(data) != expected:
        raise FormatError(f'{path}: expected {expected} bytes, file ends at byte offset {len(data)}')
    values = np.frombuffer(data, dtype='<f4', offset=CHIRALITY_HEADER.size).astype(np.float64)
    if not np.isfinite(values).all():
        raise FormatError(f'{path}: non-finite value at byte offset {CHIRALITY_HEADER.size + 4 * int(np.flatnonzero(~np.isfinite(values))[0])}')
    return values

def save_labels(path, labels):

    """
    Writes a binary labeling, one 0/1 per line.
    """

    try:
        with open(path, 'w') as file:
            file.writelines(f'{int(label)}\n' for label in labels)
    except OSError as e:
        raise StorageError(f'cannot write labels file {path}: {e}')

def load_labels(path):
    path = Path(path)
    if not path.exists():
        raise StorageError(f'labels file not found: {path}')
    labels = []
    with open(path, 'r') as file:
        for number, line in enumerate(file, start=1):
            token = line.split('#', 1)[0].strip()
            if not token:
                continue
            if token not in ('0', '1'):
                raise FormatError(f'{path}:{number}: expected 0 or 1, got {token!r}')
            labels.append(int(token))
    return np.array(labels, dtype=np.int64)

def save_annotations(path, gt):

    """
    Writes annotations, one `<sym_index> <lr_label> [<template_index>]` line per vertex.
    """

    try:
        with open(path, 'w') as file:
            file.write('# sym_index lr_label' + (' template_index' if gt.correspondence is not None else '') + '\n')
            for v in range(gt.num_vertices):
                line = f'{gt.sym_map[v]} {gt.lr_labels[v]}'
                if gt.correspondence is not None:
                    line += f' {gt.correspondence[v]}'
                file.write(line + '\n')
    except OSError as e:
        raise StorageError(f'cannot write annotation file {path}: {e}')

def load_annotations(path, num_vertices=None):

    """
    Reads an annotation file; `#` starts a comment.

    Args:
        path (str | Path): Input path.
        num_vertices (int | None): Expected vertex count, checked when given.

    Returns:
        GroundTruth: The annotations.
    """

    path = Path(path)
    if not path.exists():
        raise StorageError(f'annotation file not found: {path}')
    rows = []
    with open(path, 'r') as file:
        for number, line in enumerate(file, start=1):
            tokens = line.split('#', 1)[0].split()
            if not tokens:
                continue
            if len(tokens) not in (2, 3) or (rows and len(tokens) != len(rows[0])):
                raise FormatError(f'{path}:{number}: expected `<sym_index> <lr_label> [<template_index>]`')
            try:
                rows.append([int(token) for token in tokens])
            except ValueError:
                raise FormatError(f'{path}:{number}: non-integer annotation {line.strip()!r}')
    if not rows:
        raise FormatError(f'{path}: no annotation records')
    if num_vertices is not None and len(rows) != num_vertices:
        raise ShapeMismatchError(f'{path}: {len(rows)} annotations for {num_vertices} vertices')

    table = np.array(rows, dtype=np.int64)
    gt = GroundTruth(table[:, 0], table[:, 1], table[:, 2] if table.shape[1] == 3 else None)
    violations = gt.involution_violations()
    if violations:
        logger.warning('%s: %d symmetric counterparts do not map back', path, violations)
    return gt

def synthetic_basis(dim, basis_seed=0):

    """
    The corpus-wide latent basis: an orthonormal mixing matrix Q and the trigonometric
    frequencies and phases of the symmetry-agnostic latent.

    Args:
        dim (int): Descriptor dimension d.
        basis_seed (int): Seed shared by every shape of a corpus.

    Returns:
        Tuple: (Q of shape (d, d), frequencies of shape (d - 1, 3), phases of shape (d - 1,)).
    """

    rng = np.random.default_rng(basis_seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    frequencies = rng.uniform(-2.0, 2.0, size=(dim - 1, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=dim - 1)
    return q, frequencies, phases

def planted_latents(template_positions, dim, basis_seed=0):

    """
    The planted latent z_v = [c_v, s_v] of every template vertex.

    c_v = tanh(4 x_v) carries the side; s_v is a unit-norm smooth function of (|x_v|, y_v, z_v)
    and is identical for a vertex and its mirror image.

    Args:
        template_positions (np.ndarray): (|V|, 3) template coordinates.
        dim (int): Descriptor dimension d.
        basis_seed (int): Corpus basis seed.

    Returns:
        Tuple: (c of shape (|V|,), s of shape (|V|, d - 1)).
    """

    _, frequencies, phases = synthetic_basis(dim, basis_seed)
    x = template_positions[:, 0]
    # odd by construction so mirrored vertices get exactly negated values
    c = np.sign(x) * np.tanh(CHIRALITY_STEEPNESS * np.abs(x))
    folded = np.column_stack([np.abs(x), template_positions[:, 1], template_positions[:, 2]])
    s = np.cos(folded @ frequencies.T + phases)
    s = s / np.linalg.norm(s, axis=1, keepdims=True)
    return c, s

def mirrored_tube(half_resolution):

    """
    Builds the symmetric template: an open half tube with x >= 0 is mirrored across x = 0
    and welded along the two seams.

    Args:
        half_resolution (int): Segments around the half circumference; the tube has 2 * half_resolution segments along y.

    Returns:
        Tuple: (positions, faces, mirror index, seam mask, angle of each vertex, y of each vertex).
    """

    n = int(half_resolution)
    if n < 2:
        raise ValidationError(f'half resolution must be at least 2, got {n}')
    rows = 2 * n + 1
    column = np.repeat(np.arange(n + 1), rows)
    theta = np.pi * column / n
    y = np.tile(np.linspace(-TUBE_HALF_LENGTH, TUBE_HALF_LENGTH, rows), n + 1)
    x = np.sin(theta)
    seam = (column == 0) | (column == n)
    x[seam] = 0.0
    half = np.column_stack([x, y, np.cos(theta)])

    half_index = lambda i, j: i * rows + j
    half_faces = []
    for i in range(n):
        for j in range(rows - 1):
            a, b, c, d = half_index(i, j), half_index(i + 1, j), half_index(i + 1, j + 1), half_index(i, j + 1)
            half_faces.append((a, b, c))
            half_faces.append((a, c, d))
    half_faces = np.array(half_faces, dtype=np.int64)

    # mirror every non-seam vertex; seam vertices are welded to themselves
    interior = np.flatnonzero(~seam)
    mirror_of_half = np.arange(len(half))
    mirror_of_half[interior] = len(half) + np.arange(len(interior))
    mirrored = half[interior] * np.array([-1.0, 1.0, 1.0])
    positions = np.concatenate([half, mirrored])

    mirror = np.concatenate([mirror_of_half, interior])
    faces = np.concatenate([half_faces, mirror_of_half[half_faces][:, ::-1]])
    seam_mask = np.concatenate([seam, np.zeros(len(interior), dtype=bool)])
    angles = np.concatenate([theta, -theta[interior]])
    return positions, faces, mirror, seam_mask, angles, np.concatenate([y, y[interior]])

def generate_synthetic(seed, half_resolution, dim, noise, basis_seed=0):

    """
    Generates a bilaterally (intrinsically) symmetric shape with planted descriptors and ground truth.

    The template is deformed by a symmetric radius profile and an asymmetric bend, and the
    vertex order is permuted, both driven by `seed`. Latents live on the template so
    corresponding vertices of different shapes share them. F = z Q + noise and
    F-bar = [-c, s] Q + noise, so without noise F-bar of v equals F of its mirror.

    Args:
        seed (int): Per-shape seed.
        half_resolution (int): Template resolution.
        dim (int): Descriptor dimension d >= 8.
        noise (float): Gaussian noise scale sigma >= 0.
        basis_seed (int): Corpus-wide latent basis seed.

    Returns:
        Tuple: (TriMesh, DescriptorField, GroundTruth).
    """

    if dim < MIN_SYNTHETIC_DIM:
        raise ValidationError(f'synthetic descriptors need d >= {MIN_SYNTHETIC_DIM}, got {dim}')
    if not noise >= 0:
        raise ValidationError(f'noise level must be non-negative, got {noise}')

    rng = np.random.default_rng(seed)
    template, faces, mirror, seam, angles, y = mirrored_tube(half_resolution)

    profile = rng.uniform(-1.0, 1.0, size=3)
    radius = (1.0
              + 0.2 * profile[0] * np.cos(np.pi * y / TUBE_HALF_LENGTH)
              + 0.15 * profile[1] * np.cos(angles)
              + 0.1 * profile[2] * np.cos(2.0 * angles))
    positions = np.column_stack([radius * np.sin(angles), y, radius * np.cos(angles)])
    positions[seam, 0] = 0.0
    bend = rng.uniform(-1.0, 1.0, size=2)
    positions[:, 0] += 0.4 * bend[0] * (y / TUBE_HALF_LENGTH) ** 2
    positions[:, 2] += 0.2 * bend[1] * np.sin(np.pi * y / TUBE_HALF_LENGTH)

    q, _, _ = synthetic_basis(dim, basis_seed)
    c, s = planted_latents(template, dim, basis_seed)
    clean = np.column_stack([c, s]) @ q
    # the mirror's latent is [-c, s], so its clean descriptor is the flipped one
    clean_flipped = clean[mirror]
    values = clean + noise * rng.standard_normal(clean.shape)
    flipped = clean_flipped + noise * rng.standard_normal(clean.shape)
    lr_labels = np.where(template[:, 0] >= 0.0, 1, -1)

    perm = rng.permutation(len(template))
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))

    mesh = TriMesh(positions[perm], inverse[faces])
    field = DescriptorField(values[perm], flipped[perm])
    gt = GroundTruth(inverse[mirror[perm]], lr_labels[perm], perm.copy())
    logger.debug('Generated synthetic shape seed=%d: %d vertices, d=%d, sigma=%g', seed, mesh.num_vertices, dim, noise)
    return mesh, field, gt
