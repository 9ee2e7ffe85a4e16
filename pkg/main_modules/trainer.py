import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
from helper_modules.descriptor_helpers import load_descriptors, normalize
from helper_modules.errors import ShapeMismatchError, StorageError
from helper_modules.loss_helpers import BoundaryTuples, LOSS_NAMES, compute_losses, sample_vertices
from helper_modules.mesh_helpers import load_mesh
from helper_modules.numkernel import MomentOptimizer, backward
from main_modules.disentangler import SymmetryDisentangler, save_checkpoint

logger = logging.getLogger(__name__)

LOSS_LOG_HEADER = ['step', 'shape', 'L_dis', 'L_sim', 'L_rec', 'L_bou', 'L_con', 'total']

@dataclass
class TrainingShape:

    """
    A shape prepared for training: normalized descriptors as tensors and the boundary tuples of its mesh.
    """

    name: str
    values: torch.Tensor
    flipped: torch.Tensor
    tuples: BoundaryTuples

    @property
    def num_vertices(self):
        return self.values.shape[0]

    @property
    def input_stack(self):
        return torch.cat([self.values, self.flipped], dim=1)

@dataclass
class TrainingResult:

    """
    Outcome of a training run.

    Attributes:
        model (SymmetryDisentangler): The trained model.
        log (list): One dict per step with the loss components before the update.
        checkpoints (list): Paths written during the run.
    """

    model: SymmetryDisentangler
    log: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

def prepare_shape(name, mesh, descriptors, dim):

    """
    Validates a (mesh, descriptors) pair against each other and the model dimension.

    Returns:
        TrainingShape: The prepared shape.
    """

    if descriptors.dim != dim:
        raise ShapeMismatchError(f'{name}: descriptors have d={descriptors.dim}, configured d={dim}')
    if descriptors.num_vertices != mesh.num_vertices:
        raise ShapeMismatchError(f'{name}: {descriptors.num_vertices} descriptor rows for {mesh.num_vertices} vertices')
    normalized = normalize(descriptors)
    return TrainingShape(name, torch.from_numpy(normalized.values), torch.from_numpy(normalized.flipped), BoundaryTuples.from_mesh(mesh))

class TrainerService:

    """
    Sequential training loop: one shape per optimizer step, cycling through the corpus in manifest order.

    Attributes:
        config (RunConfig): Run settings.
    """

    def __init__(self, config):
        self.config = config

    def load_corpus(self, manifest):

        """
        Loads and prepares every shape of a manifest.
        """

        if manifest.dim != self.config.dim:
            raise ShapeMismatchError(f'manifest has d={manifest.dim}, configured d={self.config.dim}')
        shapes = []
        for entry in manifest.shapes:
            mesh = load_mesh(manifest.resolve(entry, 'mesh', self.config))
            descriptors = load_descriptors(manifest.resolve(entry, 'descriptors', self.config))
            shapes.append(prepare_shape(entry.name, mesh, descriptors, self.config.dim))
        logger.info('Loaded %d training shapes', len(shapes))
        return shapes

    def _checkpoint_path(self, step):
        path = Path(self.config.checkpoint)
        return path.with_name(f'{path.stem}.step{step:06d}{path.suffix}')

    def train(self, shapes, model=None, on_step=None):

        """
        Runs the configured number of steps.

        Args:
            shapes (list): TrainingShape items, at least one.
            model (SymmetryDisentangler | None): Model to continue from; a fresh seeded model otherwise.
            on_step (callable | None): Called as on_step(step, model) after every update.

        Returns:
            TrainingResult: The model and the per-step loss log.
        """

        if not shapes:
            raise ShapeMismatchError('training needs at least one shape')
        config = self.config
        if model is None:
            model = SymmetryDisentangler(config.dim, seed=config.seed)
        weights = config.loss_weights()
        params = dict(model.named_parameters())
        optimizer = MomentOptimizer(params, lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.adam_eps)
        generator = torch.Generator().manual_seed(config.seed)
        result = TrainingResult(model)

        for step in range(1, config.steps + 1):
            shape = shapes[(step - 1) % len(shapes)]
            sample = sample_vertices(shape.num_vertices, config.consistency_samples, generator)
            output = model(shape.values, shape.flipped)
            losses = compute_losses(output, shape.input_stack, shape.tuples, sample, weights)
            optimizer.step(backward(losses['total'], params))

            row = {'step': step, 'shape': shape.name}
            row.update({name: losses[name].item() for name in LOSS_NAMES})
            row['total'] = losses['total'].item()
            result.log.append(row)
            logger.debug('step %d %s total=%.6g', step, shape.name, row['total'])
            if on_step is not None:
                on_step(step, model)

            if config.checkpoint and config.checkpoint_every and step % config.checkpoint_every == 0 and step < config.steps:
                path = self._checkpoint_path(step)
                save_checkpoint(model, path)
                result.checkpoints.append(path)

        if config.checkpoint:
            save_checkpoint(model, config.checkpoint)
            result.checkpoints.append(Path(config.checkpoint))
        logger.info('Finished %d steps on %d shapes', config.steps, len(shapes))
        return result

def write_loss_log(path, log):

    """
    Writes the per-step loss components as CSV.
    """

    try:
        with open(path, 'w', newline='') as file:
            writer = csv.writer(file, lineterminator='\n')
            writer.writerow(LOSS_LOG_HEADER)
            for row in log:
                writer.writerow([row['step'], row['shape']] + [repr(row[name]) for name in LOSS_NAMES] + [repr(row['total'])])
    except OSError as e:
        raise StorageError(f'cannot write loss log {path}: {e}')
