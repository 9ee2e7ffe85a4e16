import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from helper_modules.errors import DegenerateFieldError, ShapeMismatchError, ValidationError
from helper_modules.mesh_helpers import connected_components, geodesic_distances, surface_area
from helper_modules.numkernel import EPS

logger = logging.getLogger(__name__)

# Set the maximum number of Lloyd iterations of the 1-D two-means clustering
MAX_LLOYD_ITERATIONS = 100

# Set the number of source rows matched per block when computing cosine similarities
MATCH_BLOCK = 1024

# Set the default weight of the chirality channel appended to matching descriptors
MATCH_ALPHA = 1.0

MATCH_MODES = ('raw', 'raw+chi', 'agno+chi', 'raw+refined', 'agno+refined')

@dataclass
class EvalReport:

    """
    Dataset-level evaluation results.

    Attributes:
        metrics (dict): Metric name to value, e.g. err_int, acc_lr, err_mat, avg_components.
        counts (dict): Number of shapes, pairs or vertices each metric aggregates.
        skipped (list): Shapes left out, as {'name', 'reason'} entries.
        per_shape (list): Per-shape metric dictionaries.
    """

    metrics: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    per_shape: list = field(default_factory=list)

    def to_text(self):

        """
        Flat `key=value` lines with sorted keys.
        """

        lines = [f'{key}={self.metrics[key]!r}' for key in sorted(self.metrics)]
        lines += [f'count.{key}={self.counts[key]}' for key in sorted(self.counts)]
        lines += [f'skipped.{entry["name"]}={entry["reason"]}' for entry in self.skipped]
        return '\n'.join(lines) + '\n'

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + '\n'

def _normalize_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norms > EPS, x / np.where(norms > EPS, norms, 1.0), 0.0)

def cluster_two(chi):

    """
    Two-centre clustering of scalar values: 1-D Lloyd iterations started at the minimum and
    maximum. The result equals thresholding at the midpoint of the converged centres;
    values above the midpoint get label 1.

    Args:
        chi (array_like): Per-vertex scalars, at least two and not all equal.

    Returns:
        np.ndarray: Labels in {0, 1}.
    """

    chi = np.asarray(chi, dtype=np.float64).ravel()
    if chi.size < 2:
        raise ValidationError('two-centre clustering needs at least two values')
    low, high = chi.min(), chi.max()
    if low == high:
        raise DegenerateFieldError('degenerate chirality field')

    for _ in range(MAX_LLOYD_ITERATIONS):
        labels = chi > 0.5 * (low + high)
        new_low, new_high = chi[~labels].mean(), chi[labels].mean()
        if new_low == low and new_high == high:
            break
        low, high = new_low, new_high
    return (chi > 0.5 * (low + high)).astype(np.int64)

def detect_symmetry(labeling, match_features):

    """
    Maps every vertex to the most cosine-similar vertex carrying the opposite label.
    Ties go to the lowest index.

    Args:
        labeling (array_like): Binary labels per vertex.
        match_features (array_like): (|V|, k) features used for matching.

    Returns:
        np.ndarray: Predicted symmetric counterpart of every vertex.
    """

    labeling = np.asarray(labeling).ravel()
    features = _normalize_rows(match_features)
    if features.shape[0] != labeling.size:
        raise ShapeMismatchError(f'{labeling.size} labels for {features.shape[0]} feature rows')
    sides = np.unique(labeling)
    if sides.size != 2:
        raise ValidationError('symmetry detection needs two non-empty clusters')

    prediction = np.empty(labeling.size, dtype=np.int64)
    for side in sides:
        source = np.flatnonzero(labeling == side)
        target = np.flatnonzero(labeling != side)
        for start in range(0, source.size, MATCH_BLOCK):
            block = source[start:start + MATCH_BLOCK]
            similarity = features[block] @ features[target].T
            prediction[block] = target[np.argmax(similarity, axis=1)]
    return prediction

def pairwise_geodesic_error(mesh, predicted, expected):

    """
    Geodesic distance between predicted and expected vertices, normalized by sqrt(area).
    """

    predicted = np.asarray(predicted, dtype=np.int64)
    expected = np.asarray(expected, dtype=np.int64)
    if predicted.shape != expected.shape:
        raise ShapeMismatchError(f'{predicted.size} predictions for {expected.size} expected vertices')
    if not predicted.size:
        return np.zeros(0)
    sources, inverse = np.unique(expected, return_inverse=True)
    distances = geodesic_distances(mesh, sources)
    return distances[inverse, predicted] / math.sqrt(surface_area(mesh))

def err_intrinsic(prediction, gt, mesh):

    """
    Mean normalized geodesic error of a predicted symmetry map. Vertices without a
    counterpart annotation are excluded.

    Args:
        prediction (array_like): Predicted counterpart per vertex.
        gt (GroundTruth): Annotations.
        mesh (TriMesh): The shape.

    Returns:
        Tuple: (mean error, number of evaluated vertices).
    """

    prediction = np.asarray(prediction, dtype=np.int64)
    if prediction.shape != (gt.num_vertices,):
        raise ShapeMismatchError(f'{prediction.size} predictions for {gt.num_vertices} annotated vertices')
    evaluated = np.flatnonzero(gt.annotated())
    if not evaluated.size:
        return 0.0, 0
    errors = pairwise_geodesic_error(mesh, prediction[evaluated], gt.sym_map[evaluated])
    return float(errors.mean()), int(evaluated.size)

def to_signs(values, binary=False):

    """
    Converts a chirality field to signs in {-1, +1} (0 maps to +1); for binary labels 0 maps to -1.
    """

    values = np.asarray(values)
    if binary:
        return np.where(values > 0, 1, -1)
    return np.where(values >= 0, 1, -1)

def left_right_hit(values, lr_labels, binary=False):

    """
    Fraction of vertices whose sign agrees with the left/right annotation.
    """

    signs = to_signs(values, binary)
    lr_labels = np.asarray(lr_labels)
    if signs.shape != lr_labels.shape:
        raise ShapeMismatchError(f'{signs.size} predictions for {lr_labels.size} labels')
    return float(np.mean(signs == lr_labels))

def acc_left_right(predictions, lr_labels, binary=False):

    """
    Left/right accuracy max{hit, 1 - hit} with hit averaged per shape over the dataset.

    Args:
        predictions (list): Per-shape chirality fields (or binary labels when `binary`).
        lr_labels (list): Per-shape annotations in {-1, +1}.
        binary (bool): Whether predictions are {0, 1} labels.

    Returns:
        float: Accuracy in [0.5, 1].
    """

    if not len(predictions):
        raise ValidationError('left/right accuracy needs at least one shape')
    if len(predictions) != len(lr_labels):
        raise ShapeMismatchError(f'{len(predictions)} predictions for {len(lr_labels)} annotated shapes')
    hit = float(np.mean([left_right_hit(p, g, binary) for p, g in zip(predictions, lr_labels)]))
    return max(hit, 1.0 - hit)

def avg_components(dataset):

    """
    Mean number of same-label connected regions over (mesh, labeling) pairs.
    """

    if not len(dataset):
        raise ValidationError('component statistics need at least one shape')
    return float(np.mean([connected_components(mesh, labeling) for mesh, labeling in dataset]))

def matching_features(mode, values, chi=None, agno=None, refined=None, alpha=MATCH_ALPHA):

    """
    Assembles the per-vertex descriptors used for inter-shape matching.

    Modes: 'raw' (F), 'raw+chi' ([F, alpha F^C]), 'agno+chi' ([F^S, alpha F^C]) and the
    refined variants 'raw+refined' / 'agno+refined' that append the refined labels mapped to {-1, +1}.

    Returns:
        np.ndarray: (|V|, k) descriptors.
    """

    if mode not in MATCH_MODES:
        raise ValidationError(f'unknown matching mode {mode!r}; expected one of {", ".join(MATCH_MODES)}')
    base = values if mode.startswith('raw') else agno
    if base is None:
        raise ValidationError(f'matching mode {mode!r} needs agnostic descriptors')
    base = _normalize_rows(base)
    if mode == 'raw':
        return base
    if mode.endswith('+chi'):
        if chi is None:
            raise ValidationError(f'matching mode {mode!r} needs chirality values')
        channel = np.asarray(chi, dtype=np.float64)
    else:
        if refined is None:
            raise ValidationError(f'matching mode {mode!r} needs refined labels')
        channel = to_signs(refined, binary=True).astype(np.float64)
    return np.column_stack([base, alpha * channel])

def match_shapes(source_features, target_features):

    """
    Maps every source vertex to the target vertex of highest cosine similarity; ties go to the lowest index.

    Args:
        source_features (array_like): (|V_X|, k) descriptors.
        target_features (array_like): (|V_Y|, k) descriptors.

    Returns:
        np.ndarray: Target index per source vertex.
    """

    source = _normalize_rows(source_features)
    target = _normalize_rows(target_features)
    if source.shape[1] != target.shape[1]:
        raise ShapeMismatchError(f'feature widths differ: {source.shape[1]} vs {target.shape[1]}')
    prediction = np.empty(source.shape[0], dtype=np.int64)
    for start in range(0, source.shape[0], MATCH_BLOCK):
        prediction[start:start + MATCH_BLOCK] = np.argmax(source[start:start + MATCH_BLOCK] @ target.T, axis=1)
    return prediction

def correspondence_between(source_gt, target_gt):

    """
    Ground-truth map from source to target vertices through their shared template indices.
    Source vertices whose template vertex is absent on the target get -1.
    """

    if source_gt.correspondence is None or target_gt.correspondence is None:
        raise ValidationError('inter-shape ground truth needs template correspondences on both shapes')
    lookup = np.full(max(source_gt.correspondence.max(), target_gt.correspondence.max()) + 1, -1, dtype=np.int64)
    lookup[target_gt.correspondence] = np.arange(target_gt.num_vertices)
    return lookup[source_gt.correspondence]

def err_matching(prediction, expected, target_mesh):

    """
    Mean normalized geodesic error of an inter-shape map on the target shape.
    Source vertices with expected index -1 are excluded.

    Returns:
        Tuple: (mean error, number of evaluated vertices).
    """

    prediction = np.asarray(prediction, dtype=np.int64)
    expected = np.asarray(expected, dtype=np.int64)
    if prediction.shape != expected.shape:
        raise ShapeMismatchError(f'{prediction.size} predictions for {expected.size} expected vertices')
    evaluated = np.flatnonzero(expected >= 0)
    if not evaluated.size:
        return 0.0, 0
    errors = pairwise_geodesic_error(target_mesh, prediction[evaluated], expected[evaluated])
    return float(errors.mean()), int(evaluated.size)
