import logging
from collections import deque
from dataclasses import dataclass

import networkx as nx
import numpy as np
from networkx.algorithms.flow import boykov_kolmogorov
from helper_modules.errors import ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)

# Set the Potts weight charged for every edge whose endpoints disagree
POTTS_WEIGHT = 1.0

# Set the relative residual capacity below which an edge counts as saturated
RESIDUAL_TOLERANCE = 1e-12

SOURCE = 'source'
SINK = 'sink'

@dataclass
class MrfInstance:

    """
    A binary MRF on the mesh edge graph.

    Attributes:
        unary (np.ndarray): (|V|, 2) costs theta_v(0), theta_v(1).
        edges (np.ndarray): (|E|, 2) undirected edges.
        weights (np.ndarray): (|E|,) Potts weights.
    """

    unary: np.ndarray
    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.unary.ndim != 2 or self.unary.shape[1] != 2:
            raise ShapeMismatchError(f'unary potentials must have shape (n, 2), got {self.unary.shape}')
        if self.weights.shape != (len(self.edges),):
            raise ShapeMismatchError(f'{self.weights.size} pairwise weights for {len(self.edges)} edges')
        for name, values in (('unary', self.unary), ('pairwise', self.weights)):
            if not np.isfinite(values).all() or (values < 0).any():
                raise ValidationError(f'{name} potentials must be finite and non-negative')
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= len(self.unary)):
            raise ValidationError('edge index out of range')

    @property
    def num_vertices(self):
        return self.unary.shape[0]

@dataclass
class BinaryLabeling:

    """
    A labeling in {0, 1}^|V| with its energy under the instance it was solved for.
    """

    labels: np.ndarray
    energy: float

def minmax_unit(values):

    """
    Min-max normalization to [0, 1]; a constant input maps to 0.5 everywhere.
    """

    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high == low:
        return np.full_like(values, 0.5)
    return (values - low) / (high - low)

def build_instance(chi, mesh, omega=POTTS_WEIGHT):

    """
    Builds the refinement MRF: theta_v(0) = chi_v and theta_v(1) = 1 - chi_v after min-max
    normalization, with Potts weight omega on every mesh edge.

    Args:
        chi (array_like): Per-vertex chirality values.
        mesh (TriMesh): The mesh providing the edges.
        omega (float): Potts weight, non-negative.

    Returns:
        MrfInstance: The instance.
    """

    chi = np.asarray(chi, dtype=np.float64)
    if chi.shape != (mesh.num_vertices,):
        raise ShapeMismatchError(f'{chi.size} chirality values for {mesh.num_vertices} vertices')
    if not (np.isfinite(omega) and omega >= 0):
        raise ValidationError(f'Potts weight must be finite and non-negative, got {omega}')
    unit = minmax_unit(chi)
    return MrfInstance(np.column_stack([unit, 1.0 - unit]), mesh.edges, np.full(len(mesh.edges), float(omega)))

def energy(instance, labels):

    """
    Evaluates sum of unaries plus omega for every disagreeing edge.

    Args:
        instance (MrfInstance): The instance.
        labels (array_like): Labels in {0, 1}.

    Returns:
        float: The energy.
    """

    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (instance.num_vertices,):
        raise ShapeMismatchError(f'{labels.size} labels for {instance.num_vertices} vertices')
    unary = instance.unary[np.arange(instance.num_vertices), labels].sum()
    edges = instance.edges
    cut = labels[edges[:, 0]] != labels[edges[:, 1]]
    return float(unary + instance.weights[cut].sum())

def _flow_network(instance):
    graph = nx.DiGraph()
    graph.add_nodes_from([SOURCE, SINK])
    graph.add_nodes_from(range(instance.num_vertices))
    # source side means label 1: a vertex left on the sink side cuts source->v and pays theta_v(0)
    for v, (cost0, cost1) in enumerate(instance.unary):
        graph.add_edge(SOURCE, v, capacity=float(cost0))
        graph.add_edge(v, SINK, capacity=float(cost1))
    for (u, v), weight in zip(instance.edges, instance.weights):
        u, v = int(u), int(v)
        for a, b in ((u, v), (v, u)):
            if graph.has_edge(a, b):
                graph[a][b]['capacity'] += float(weight)
            else:
                graph.add_edge(a, b, capacity=float(weight))
    return graph

def _source_reachable(residual, tolerance):
    seen = {SOURCE}
    queue = deque([SOURCE])
    while queue:
        node = queue.popleft()
        for neighbor, attr in residual[node].items():
            if neighbor not in seen and attr['capacity'] - attr['flow'] > tolerance:
                seen.add(neighbor)
                queue.append(neighbor)
    return seen

def solve(instance):

    """
    Exact minimization of the binary Potts energy by an s-t minimum cut (Boykov-Kolmogorov max-flow).

    Among optimal labelings the one with the smallest set of label-1 vertices is returned:
    label 1 is the source side of the cut and the source side is taken as the vertices
    reachable from the source in the final residual network.

    Args:
        instance (MrfInstance): The instance.

    Returns:
        BinaryLabeling: Optimal labels and their energy.
    """

    graph = _flow_network(instance)
    residual = boykov_kolmogorov(graph, SOURCE, SINK, capacity='capacity')
    scale = max(float(instance.unary.max(initial=0.0)), float(instance.weights.max(initial=0.0)), 1.0)
    reachable = _source_reachable(residual, RESIDUAL_TOLERANCE * scale)
    labels = np.zeros(instance.num_vertices, dtype=np.int64)
    labels[[v for v in reachable if v != SOURCE]] = 1
    value = energy(instance, labels)
    logger.debug('Max-flow %.12g, labeling energy %.12g, %d vertices labeled 1',
                 residual.graph['flow_value'], value, int(labels.sum()))
    return BinaryLabeling(labels, value)

def threshold_labels(chi, level=0.5):

    """
    Labels after min-max normalization: 1 where the normalized value exceeds `level`.
    """

    return (minmax_unit(chi) > level).astype(np.int64)

def refine(chi, mesh, omega=POTTS_WEIGHT):

    """
    Builds and solves the refinement MRF for a chirality field.

    Returns:
        BinaryLabeling: The refined binary chirality.
    """

    return solve(build_instance(chi, mesh, omega))
