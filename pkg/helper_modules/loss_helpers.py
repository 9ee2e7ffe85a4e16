import math
from dataclasses import dataclass

import torch
from helper_modules.errors import ShapeMismatchError, ValidationError
from helper_modules.numkernel import DTYPE, EPS, minmax_normalize

# Set the default loss weights lambda_1..lambda_4 of the total loss
LAMBDA_SIM = 1.0
LAMBDA_REC = 0.2
LAMBDA_BOU = 10.0
LAMBDA_CON = 2.0

# Set the default number of vertices sampled for the consistency loss
CONSISTENCY_SAMPLES = 512

LOSS_NAMES = ('dis', 'sim', 'rec', 'bou', 'con')

@dataclass(frozen=True)
class LossWeights:

    """
    Weights of the total loss L = L_dis + sim * L_sim + rec * L_rec + bou * L_bou + con * L_con.
    A zero weight removes its term, which is how ablation runs are configured.
    """

    sim: float = LAMBDA_SIM
    rec: float = LAMBDA_REC
    bou: float = LAMBDA_BOU
    con: float = LAMBDA_CON

    def __post_init__(self):
        for name in ('sim', 'rec', 'bou', 'con'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f'loss weight {name} must be finite and non-negative, got {value}')

@dataclass(frozen=True)
class ConsistencyIntermediates:

    """
    W (squared chirality differences), C_c (agnostic similarity) and the soft assignment
    Pi = norm(W) * norm(C_c) over the sampled vertices.
    """

    w: torch.Tensor
    similarity: torch.Tensor
    assignment: torch.Tensor

@dataclass(frozen=True)
class BoundaryTuples:

    """
    Tensor view of the mesh tuple sets used by the boundary loss.
    """

    center: torch.Tensor
    incoming: torch.Tensor
    outgoing: torch.Tensor
    cosine: torch.Tensor
    padded: torch.Tensor
    mask: torch.Tensor
    num_vertices: int

    @classmethod
    def from_mesh(cls, mesh):
        sets = mesh.tuple_sets
        return cls(
            center=torch.from_numpy(sets.center),
            incoming=torch.from_numpy(sets.incoming),
            outgoing=torch.from_numpy(sets.outgoing),
            cosine=torch.from_numpy(sets.cosine).to(DTYPE),
            padded=torch.from_numpy(sets.padded),
            mask=torch.from_numpy(sets.mask),
            num_vertices=mesh.num_vertices,
        )

def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatchError(f'{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ')

def loss_dis(chi, chi_flipped):

    """
    Dissimilarity loss -||F^C - F-bar^C||_2 / sqrt(|V|). Never positive.
    """

    _check_same_shape(chi, chi_flipped, 'loss_dis')
    return -torch.linalg.vector_norm(chi - chi_flipped) / math.sqrt(chi.shape[0])

def loss_sim(agno, agno_flipped):

    """
    Similarity loss ||F^S - F-bar^S||_F / sqrt(|V|).
    """

    _check_same_shape(agno, agno_flipped, 'loss_sim')
    return torch.linalg.vector_norm(agno - agno_flipped) / math.sqrt(agno.shape[0])

def loss_rec(input_stack, reconstruction):

    """
    Reconstruction loss ||[F, F-bar] - D(E([F, F-bar]))||_F / sqrt(|V|).
    """

    _check_same_shape(input_stack, reconstruction, 'loss_rec')
    return torch.linalg.vector_norm(input_stack - reconstruction) / math.sqrt(input_stack.shape[0])

def _boundary_branch(tuples, chi):
    du = chi[tuples.incoming] - chi[tuples.center]
    dw = chi[tuples.center] - chi[tuples.outgoing]
    scores = du * du + dw * dw - tuples.cosine
    padded = torch.where(tuples.mask, scores[tuples.padded], torch.full_like(scores[tuples.padded], math.inf))
    # torch.min along a dimension returns the first minimal index, so ties go to the lowest tuple
    best = padded.min(dim=1).values
    return torch.where(tuples.mask.any(dim=1), best, torch.zeros_like(best)).sum()

def loss_bou(tuples, chi, chi_flipped):

    """
    Boundary loss: per vertex, the best straight-through tuple of S_v scored by
    L(u, v, w) - C_v(u, w), for both F^C and F-bar^C, averaged over all vertices.
    Vertices with an empty S_v contribute 0 and stay in the average.

    Args:
        tuples (BoundaryTuples): Tuple sets of the mesh.
        chi (torch.Tensor): (|V|,) chirality of F.
        chi_flipped (torch.Tensor): (|V|,) chirality of F-bar.

    Returns:
        torch.Tensor: Scalar loss.
    """

    _check_same_shape(chi, chi_flipped, 'loss_bou')
    if chi.shape[0] != tuples.num_vertices:
        raise ShapeMismatchError(f'loss_bou: {chi.shape[0]} chirality values for a mesh with {tuples.num_vertices} vertices')
    if tuples.center.numel() == 0:
        return (chi.sum() + chi_flipped.sum()) * 0.0
    total = _boundary_branch(tuples, chi) + _boundary_branch(tuples, chi_flipped)
    return total / tuples.num_vertices

def soft_assignment(chi, agno, eps=EPS):

    """
    Builds W, C_c and Pi for one branch.

    Args:
        chi (torch.Tensor): (m,) chirality values.
        agno (torch.Tensor): (m, d - 1) unit-row agnostic descriptors.
        eps (float): Min-max normalization guard.

    Returns:
        ConsistencyIntermediates: The matrices.
    """

    diff = chi[:, None] - chi[None, :]
    w = diff * diff
    similarity = agno @ agno.T
    return ConsistencyIntermediates(w, similarity, minmax_normalize(w, eps) * minmax_normalize(similarity, eps))

def consistency_from_assignments(assignment, assignment_flipped):

    """
    ||[I, I] - [Pi^2, Pi-bar^2]||_F / m for given soft assignments.
    """

    _check_same_shape(assignment, assignment_flipped, 'consistency')
    m = assignment.shape[0]
    identity = torch.eye(m, dtype=assignment.dtype)
    residual = torch.cat([identity - assignment @ assignment, identity - assignment_flipped @ assignment_flipped], dim=1)
    return torch.linalg.vector_norm(residual) / m

def loss_con(chi, agno, chi_flipped, agno_flipped, sample):

    """
    Consistency loss on a vertex sample: matching the shape to itself through its mirror
    should compose to the identity, so Pi^2 and Pi-bar^2 are pulled towards I.

    Args:
        chi, chi_flipped (torch.Tensor): (|V|,) chirality of F and F-bar.
        agno, agno_flipped (torch.Tensor): (|V|, d - 1) agnostic descriptors.
        sample (torch.Tensor): Distinct vertex indices.

    Returns:
        torch.Tensor: Scalar loss.
    """

    sample = torch.as_tensor(sample, dtype=torch.long)
    n = chi.shape[0]
    if sample.numel() == 0:
        raise ValidationError('consistency sample is empty')
    if sample.min() < 0 or sample.max() >= n:
        raise ValidationError(f'consistency sample index out of range for {n} vertices')
    if torch.unique(sample).numel() != sample.numel():
        raise ValidationError('consistency sample contains duplicate indices')
    branch = soft_assignment(chi[sample], agno[sample])
    branch_flipped = soft_assignment(chi_flipped[sample], agno_flipped[sample])
    return consistency_from_assignments(branch.assignment, branch_flipped.assignment)

def sample_vertices(num_vertices, count=CONSISTENCY_SAMPLES, generator=None):

    """
    Draws min(|V|, count) distinct vertices uniformly, returned in ascending order.
    """

    perm = torch.randperm(num_vertices, generator=generator)
    return torch.sort(perm[:min(num_vertices, count)]).values

def loss_total(components, weights):

    """
    Weighted total L_dis + lambda_1 L_sim + lambda_2 L_rec + lambda_3 L_bou + lambda_4 L_con.

    Args:
        components (dict): Loss values keyed by 'dis', 'sim', 'rec', 'bou', 'con'.
        weights (LossWeights): The lambdas.

    Returns:
        The total, of the same type as the components.
    """

    for name in LOSS_NAMES:
        value = components[name]
        if torch.is_tensor(value):
            value = value.item()
        if not math.isfinite(value):
            raise ValidationError(f'loss component {name} is not finite')
    total = components['dis']
    for name in ('sim', 'rec', 'bou', 'con'):
        weight = getattr(weights, name)
        if weight:
            total = total + weight * components[name]
    return total

def compute_losses(output, input_stack, tuples, sample, weights):

    """
    All five losses and the weighted total for one forward pass.

    Args:
        output (DisentanglerOutput): Result of the disentangler forward pass.
        input_stack (torch.Tensor): [F, F-bar] column stack.
        tuples (BoundaryTuples): Tuple sets of the shape.
        sample (torch.Tensor): Consistency sample.
        weights (LossWeights): Loss weights.

    Returns:
        dict: Tensors keyed by 'dis', 'sim', 'rec', 'bou', 'con' and 'total'.
    """

    components = {
        'dis': loss_dis(output.chi, output.chi_flipped),
        'sim': loss_sim(output.agno, output.agno_flipped),
        'rec': loss_rec(input_stack, output.reconstruction),
        'bou': loss_bou(tuples, output.chi, output.chi_flipped),
        'con': loss_con(output.chi, output.agno, output.chi_flipped, output.agno_flipped, sample),
    }
    components['total'] = loss_total(components, weights)
    return components
