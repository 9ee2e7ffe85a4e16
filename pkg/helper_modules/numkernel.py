import logging
import torch
from helper_modules.errors import ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)

# Set the precision for all training and loss computation
DTYPE = torch.float64

# Set the guard used by every normalization
EPS = 1e-12

# Set the default adaptive-moment optimizer settings
LEARNING_RATE = 1e-4
BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

def as_matrix(values, name='matrix'):

    """
    Converts array-like input to a float64 tensor with two dimensions.
    32-bit input is promoted; non-finite entries are rejected.

    Args:
        values (array_like | torch.Tensor): The values to convert.
        name (str): Name used in error messages.

    Returns:
        torch.Tensor: A (rows, cols) float64 tensor.
    """

    tensor = torch.as_tensor(values).to(DTYPE)
    if tensor.dim() == 1:
        tensor = tensor.unsqueeze(1)
    if tensor.dim() != 2:
        raise ShapeMismatchError(f'{name} must be two-dimensional, got shape {tuple(tensor.shape)}')
    if not torch.isfinite(tensor).all():
        raise ValidationError(f'{name} contains NaN or infinite entries')
    return tensor

def matmul(a, b):

    """
    Standard matrix product at 64-bit precision.

    Args:
        a (torch.Tensor): Left operand of shape (n, k).
        b (torch.Tensor): Right operand of shape (k, m).

    Returns:
        torch.Tensor: The (n, m) product.
    """

    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f'cannot multiply {tuple(a.shape)} by {tuple(b.shape)}')
    return a @ b

def row_l2_normalize(x, eps=EPS):

    """
    Scales every row of x to unit L2 norm. Rows whose norm is at most eps become zero rows.

    The square root is only taken of guarded values so zero rows also have finite gradients.

    Args:
        x (torch.Tensor): Matrix of shape (n, k).
        eps (float): Degenerate-row threshold.

    Returns:
        torch.Tensor: The row-normalized matrix.
    """

    squared = (x * x).sum(dim=1, keepdim=True)
    keep = squared > eps * eps
    norms = torch.sqrt(torch.where(keep, squared, torch.ones_like(squared)))
    return torch.where(keep, x / norms, torch.zeros_like(x))

def minmax_normalize(x, eps=EPS):

    """
    Global min-max normalization over all entries: (x - min) / (max - min + eps).
    A constant input maps to all zeros.

    Args:
        x (torch.Tensor): Any tensor.
        eps (float): Denominator guard.

    Returns:
        torch.Tensor: Values in [0, 1).
    """

    low = x.min()
    high = x.max()
    return (x - low) / (high - low + eps)

def backward(root, params):

    """
    Reverse-mode differentiation of a scalar root with respect to named leaf parameters.

    Args:
        root (torch.Tensor): A scalar tensor recorded on the autograd tape.
        params (dict): Mapping of parameter name to leaf tensor.

    Returns:
        dict: Mapping of parameter name to gradient tensor, zeros for parameters the root does not reach.
    """

    if root.numel() != 1:
        raise ShapeMismatchError(f'backward needs a scalar root, got shape {tuple(root.shape)}')
    names = list(params)
    tensors = [params[name] for name in names]
    if not root.requires_grad:
        return {name: torch.zeros_like(tensor) for name, tensor in zip(names, tensors)}
    grads = torch.autograd.grad(root.reshape(()), tensors, allow_unused=True)
    return {
        name: torch.zeros_like(tensor) if grad is None else grad
        for name, tensor, grad in zip(names, tensors, grads)
    }

class MomentOptimizer:

    """
    Adaptive-moment optimizer with bias correction over named parameters.

    Attributes:
        params (dict): The named leaf tensors being optimized.
        step_count (int): Number of accepted steps.
        optimizer (torch.optim.Adam): Holds the first/second moment accumulators.
    """

    def __init__(self, params, lr=LEARNING_RATE, betas=(BETA1, BETA2), eps=ADAM_EPS):
        self.params = dict(params)
        self.step_count = 0
        self.optimizer = torch.optim.Adam(list(self.params.values()), lr=lr, betas=betas, eps=eps)

    def step(self, grads):

        """
        Applies one update. The step is rejected before any state changes when a gradient is not finite.

        Args:
            grads (dict): Mapping of parameter name to gradient, shapes matching the parameters.
        """

        bad = []
        for name, param in self.params.items():
            grad = grads[name]
            if grad.shape != param.shape:
                raise ShapeMismatchError(f'gradient for {name} has shape {tuple(grad.shape)}, parameter has {tuple(param.shape)}')
            if not torch.isfinite(grad).all():
                bad.append(name)
        if bad:
            logger.error('Rejected optimizer step %d: non-finite gradients in %s', self.step_count + 1, ', '.join(bad))
            raise ValidationError(f'non-finite gradient for parameters: {", ".join(bad)}')

        for name, param in self.params.items():
            param.grad = grads[name].detach().clone()
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.step_count += 1

    def moments(self, name):

        """
        Returns the (first, second) moment accumulators of a parameter, or None before its first step.
        """

        state = self.optimizer.state.get(self.params[name])
        if not state:
            return None
        return state['exp_avg'], state['exp_avg_sq']
