import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from helper_modules.errors import FormatError, ShapeMismatchError, StorageError, ValidationError
from helper_modules.numkernel import DTYPE, EPS, row_l2_normalize

logger = logging.getLogger(__name__)

# Set the standard deviation of the inner MLP weights at initialization
INIT_STD = 1e-3

# Set the checkpoint header: magic, u32 version, u64 d, u32 number of tensors
CHECKPOINT_MAGIC = b'SDCK'
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct('<4sIQI')

@dataclass
class DisentanglerOutput:

    """
    Result of one forward pass over a descriptor field.

    Attributes:
        chi (torch.Tensor): (|V|,) symmetry-informative channel of F, in [-1, 1].
        agno (torch.Tensor): (|V|, d - 1) symmetry-agnostic descriptors of F with unit rows.
        chi_flipped (torch.Tensor): Same for F-bar.
        agno_flipped (torch.Tensor): Same for F-bar.
        reconstruction (torch.Tensor): (|V|, 2d) decoder output for [F, F-bar].
        mid (torch.Tensor): Encoder output of F before normalization.
        mid_flipped (torch.Tensor): Encoder output of F-bar before normalization.
    """

    chi: torch.Tensor
    agno: torch.Tensor
    chi_flipped: torch.Tensor
    agno_flipped: torch.Tensor
    reconstruction: torch.Tensor
    mid: torch.Tensor
    mid_flipped: torch.Tensor

class SkipMLP(nn.Module):

    """
    Three affine layers d -> d -> d -> d with ReLU in between and a skip connection: x + mlp(x).
    """

    def __init__(self, dim):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(dim, dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(dim, dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(dim, dim, dtype=DTYPE),
        )

    def forward(self, x):
        return x + self.layers(x)

def skew_part(generator):

    """
    The skew-symmetric matrix S = U - U^T built from the strict upper triangle U of `generator`.
    """

    upper = torch.triu(generator, diagonal=1)
    return upper - upper.T

def cayley(skew):

    """
    Cayley transform A = (I - S)^-1 (I + S) of a skew-symmetric S. The result is orthonormal.

    Args:
        skew (torch.Tensor): (d, d) skew-symmetric matrix.

    Returns:
        torch.Tensor: (d, d) orthonormal matrix.
    """

    if skew.dim() != 2 or skew.shape[0] != skew.shape[1]:
        raise ShapeMismatchError(f'Cayley transform needs a square matrix, got {tuple(skew.shape)}')
    identity = torch.eye(skew.shape[0], dtype=skew.dtype)
    return torch.linalg.solve(identity - skew, identity + skew)

class SymmetryDisentangler(nn.Module):

    """
    Autoencoder with a trainable orthonormal projection that splits normalized encoder
    features into a 1-D symmetry-informative channel and a (d - 1)-D symmetry-agnostic part.

    Attributes:
        dim (int): Descriptor dimension d.
        encoder (SkipMLP): E.
        decoder (SkipMLP): D.
        skew_generator (nn.Parameter): (d, d) raw parameter whose strict upper triangle defines S.
    """

    def __init__(self, dim, init_std=INIT_STD, seed=0):

        """
        Initialize with small Gaussian inner weights, zero biases and S = 0, so the model
        starts near the identity with A = I.

        Args:
            dim (int): Descriptor dimension, at least 2.
            init_std (float): Standard deviation of the inner weights.
            seed (int): Seed of the initialization.
        """

        super().__init__()
        if dim < 2:
            raise ValidationError(f'descriptor dimension must be at least 2, got {dim}')
        self.dim = int(dim)
        self.encoder = SkipMLP(self.dim)
        self.decoder = SkipMLP(self.dim)
        self.skew_generator = nn.Parameter(torch.zeros(self.dim, self.dim, dtype=DTYPE))
        self.reset_parameters(init_std, seed)

    def reset_parameters(self, init_std=INIT_STD, seed=0):
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for module in (self.encoder, self.decoder):
                for layer in module.layers:
                    if isinstance(layer, nn.Linear):
                        layer.weight.copy_(init_std * torch.randn(layer.weight.shape, generator=generator, dtype=DTYPE))
                        layer.bias.zero_()
            self.skew_generator.zero_()

    def skew(self):
        return skew_part(self.skew_generator)

    def cayley(self):
        return cayley(self.skew())

    def set_skew(self, skew):

        """
        Sets the generator so that S equals the given skew-symmetric matrix.
        """

        skew = torch.as_tensor(skew, dtype=DTYPE)
        if skew.shape != (self.dim, self.dim):
            raise ShapeMismatchError(f'skew matrix must be {self.dim}x{self.dim}, got {tuple(skew.shape)}')
        if not torch.allclose(skew, -skew.T, rtol=0.0, atol=1e-12):
            raise ValidationError('matrix is not skew-symmetric')
        with torch.no_grad():
            self.skew_generator.copy_(torch.triu(skew, diagonal=1))

    def project(self, mid):

        """
        Normalizes F^mid row-wise, rotates by A and splits column 0 from the rest.

        Returns:
            Tuple: (chi of shape (|V|,), unit-row agno of shape (|V|, d - 1)).
        """

        projected = row_l2_normalize(mid, EPS) @ self.cayley()
        return projected[:, 0], row_l2_normalize(projected[:, 1:], EPS)

    def forward(self, values, flipped):

        """
        Disentangles F and F-bar and reconstructs the stacked input [F, F-bar].

        Args:
            values (torch.Tensor): (|V|, d) descriptors F.
            flipped (torch.Tensor): (|V|, d) flipped descriptors F-bar.

        Returns:
            DisentanglerOutput: Both branches and the reconstruction.
        """

        for name, tensor in (('descriptors', values), ('flipped descriptors', flipped)):
            if tensor.dim() != 2 or tensor.shape[1] != self.dim:
                raise ShapeMismatchError(f'{name} of shape {tuple(tensor.shape)} do not match model dimension {self.dim}')
        if values.shape != flipped.shape:
            raise ShapeMismatchError(f'descriptor shapes differ: {tuple(values.shape)} vs {tuple(flipped.shape)}')

        mid = self.encoder(values)
        mid_flipped = self.encoder(flipped)
        chi, agno = self.project(mid)
        chi_flipped, agno_flipped = self.project(mid_flipped)
        reconstruction = torch.cat([self.decoder(mid), self.decoder(mid_flipped)], dim=1)
        return DisentanglerOutput(chi, agno, chi_flipped, agno_flipped, reconstruction, mid, mid_flipped)

    def disentangle(self, field):

        """
        Inference on a DescriptorField.

        Returns:
            Tuple: numpy arrays (chi, agno, chi_flipped, agno_flipped).
        """

        with torch.no_grad():
            output = self(torch.from_numpy(field.values), torch.from_numpy(field.flipped))
        return output.chi.numpy(), output.agno.numpy(), output.chi_flipped.numpy(), output.agno_flipped.numpy()

def parameter_shapes(dim):

    """
    Names and shapes of every model parameter for descriptor dimension `dim`, in state_dict order.
    """

    shapes = {'skew_generator': (dim, dim)}
    for module in ('encoder', 'decoder'):
        for index in (0, 2, 4):
            shapes[f'{module}.layers.{index}.weight'] = (dim, dim)
            shapes[f'{module}.layers.{index}.bias'] = (dim,)
    return shapes

def save_checkpoint(model, path):

    """
    Writes every parameter as named float64 little-endian data behind a versioned header.

    Args:
        model (SymmetryDisentangler): The model.
        path (str | Path): Output path.
    """

    state = model.state_dict()
    chunks = [CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.dim, len(state))]
    for name, tensor in state.items():
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)) + encoded)
        chunks.append(struct.pack('<I', tensor.dim()) + struct.pack(f'<{tensor.dim()}Q', *tensor.shape))
        chunks.append(tensor.detach().numpy().astype('<f8').tobytes())
    try:
        Path(path).write_bytes(b''.join(chunks))
    except OSError as e:
        raise StorageError(f'cannot write checkpoint {path}: {e}')
    logger.info('Wrote checkpoint %s (d=%d, %d tensors)', path, model.dim, len(state))

class _Reader:

    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.data):
            raise FormatError(f'{self.path}: truncated {what} at byte offset {self.offset}')
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

def load_checkpoint(path, expected_dim=None):

    """
    Reads a checkpoint written by save_checkpoint.

    Args:
        path (str | Path): Checkpoint file.
        expected_dim (int | None): Descriptor dimension the caller will feed, checked when given.

    Returns:
        SymmetryDisentangler: The restored model.
    """

    path = Path(path)
    if not path.exists():
        raise StorageError(f'checkpoint not found: {path}')
    reader = _Reader(path.read_bytes(), path)
    magic, version, dim, count = reader.unpack(CHECKPOINT_HEADER.format, 'header')
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f'{path}: bad magic {magic!r} at byte offset 0')
    if version != CHECKPOINT_VERSION:
        raise FormatError(f'{path}: unsupported version {version} at byte offset 4')
    if expected_dim is not None and dim != expected_dim:
        raise ShapeMismatchError(f'{path}: checkpoint has d={dim}, descriptors have d={expected_dim}')

    if dim < 2:
        raise FormatError(f'{path}: descriptor dimension {dim} at byte offset 8')
    reference = parameter_shapes(dim)
    # each tensor carries at least its float64 payload
    payload = 8 * sum(math.prod(shape) for shape in reference.values())
    if payload > len(reader.data) - reader.offset:
        raise FormatError(f'{path}: truncated payload, d={dim} needs at least {payload} bytes after byte offset {reader.offset}')

    state = {}
    for _ in range(count):
        (length,) = reader.unpack('<I', 'tensor name')
        name = reader.take(length, 'tensor name').decode('utf-8')
        (ndim,) = reader.unpack('<I', 'tensor rank')
        shape = reader.unpack(f'<{ndim}Q', 'tensor shape')
        if reference.get(name) != shape:
            raise ShapeMismatchError(f'{path}: unexpected tensor {name} of shape {shape} for d={dim}')
        size = math.prod(shape)
        values = np.frombuffer(reader.take(8 * size, f'tensor {name}'), dtype='<f8').reshape(shape)
        state[name] = torch.from_numpy(values.astype(np.float64))
    if reader.offset != len(reader.data):
        raise FormatError(f'{path}: trailing data after byte offset {reader.offset}')
    missing = set(reference) - set(state)
    if missing:
        raise FormatError(f'{path}: missing tensors {", ".join(sorted(missing))}')
    model = SymmetryDisentangler(dim)
    model.load_state_dict(state)
    logger.debug('Loaded checkpoint %s (d=%d)', path, dim)
    return model
