import numpy as np
import torch
from helper_modules.descriptor_helpers import DescriptorField, synthetic_basis
from helper_modules.mesh_helpers import TriMesh
from main_modules.disentangler import SymmetryDisentangler

GOLDEN = (1.0 + 5.0 ** 0.5) / 2.0

ICOSAHEDRON_VERTICES = [
    (-1, GOLDEN, 0), (1, GOLDEN, 0), (-1, -GOLDEN, 0), (1, -GOLDEN, 0),
    (0, -1, GOLDEN), (0, 1, GOLDEN), (0, -1, -GOLDEN), (0, 1, -GOLDEN),
    (GOLDEN, 0, -1), (GOLDEN, 0, 1), (-GOLDEN, 0, -1), (-GOLDEN, 0, 1),
]

ICOSAHEDRON_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]

def unit_square():

    """
    Two triangles covering the unit square in z = 0, split along the diagonal 0-2.
    """

    positions = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)]
    return TriMesh(positions, [(0, 1, 2), (0, 2, 3)])

def flat_grid(columns, rows, spacing=1.0, jitter=0.0, rng=None):

    """
    A columns x rows vertex grid in the plane z = 0; vertex (i, j) has index j * columns + i.
    Optional jitter perturbs z only.
    """

    i, j = np.meshgrid(np.arange(columns), np.arange(rows), indexing='xy')
    positions = np.column_stack([spacing * i.ravel(), spacing * j.ravel(), np.zeros(i.size)]).astype(np.float64)
    if jitter:
        positions[:, 2] = jitter * rng.standard_normal(i.size)
    faces = []
    for b in range(rows - 1):
        for a in range(columns - 1):
            v = b * columns + a
            faces.append((v, v + 1, v + columns + 1))
            faces.append((v, v + columns + 1, v + columns))
    return TriMesh(positions, faces)

def icosphere(subdivisions=2):

    """
    A unit sphere from a subdivided icosahedron with outward face winding.
    """

    positions = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in ICOSAHEDRON_VERTICES]
    faces = list(ICOSAHEDRON_FACES)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                middle = positions[a] + positions[b]
                positions.append(middle / np.linalg.norm(middle))
                cache[key] = len(positions) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    return TriMesh(np.array(positions), faces)

def random_grid_mesh(rng, max_vertices=16):

    """
    A small grid with random size and out-of-plane jitter, at most `max_vertices` vertices.
    """

    while True:
        columns, rows = rng.integers(2, 5, size=2)
        if columns * rows <= max_vertices:
            return flat_grid(int(columns), int(rows), jitter=0.3, rng=rng)

def random_field(rng, num_vertices, dim):
    return DescriptorField(rng.standard_normal((num_vertices, dim)), rng.standard_normal((num_vertices, dim)))

def random_model(dim, seed, std=0.5):

    """
    A model with large random weights and a random skew generator, so that gradients
    are far from ReLU kinks and A differs from the identity.
    """

    model = SymmetryDisentangler(dim, init_std=std, seed=seed)
    generator = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for module in (model.encoder, model.decoder):
            for layer in module.layers:
                if isinstance(layer, torch.nn.Linear):
                    layer.bias.copy_(0.1 * torch.randn(layer.bias.shape, generator=generator, dtype=torch.float64))
        model.skew_generator.copy_(0.3 * torch.randn(dim, dim, generator=generator, dtype=torch.float64))
    return model

def oracle_model(dim, basis_seed=0):

    """
    An identity-encoder model whose rotation undoes the synthetic mixing basis, so that
    chi is the planted chirality coordinate of the normalized latent and agno its mirror-invariant part.
    """

    q, _, _ = synthetic_basis(dim, basis_seed)
    rotation = q.T.copy()
    if np.linalg.det(rotation) < 0:
        # flipping an agnostic axis keeps agno mirror-invariant and makes the rotation proper
        rotation[:, -1] = -rotation[:, -1]
    identity = np.eye(dim)
    skew = (rotation - identity) @ np.linalg.inv(rotation + identity)
    model = SymmetryDisentangler(dim, init_std=0.0)
    model.set_skew(0.5 * (skew - skew.T))
    return model
