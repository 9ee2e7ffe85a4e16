import json
import logging
import math
import os
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from helper_modules.errors import FormatError, StorageError, ValidationError
from helper_modules.loss_helpers import CONSISTENCY_SAMPLES, LAMBDA_BOU, LAMBDA_CON, LAMBDA_REC, LAMBDA_SIM, LossWeights
from helper_modules.numkernel import ADAM_EPS, BETA1, BETA2, LEARNING_RATE
from helper_modules.refine_helpers import POTTS_WEIGHT
from helper_modules.analysis_helpers import MATCH_ALPHA, MATCH_MODES

logger = logging.getLogger(__name__)

# Get the config file path from an environment variable when --config is not given
CONFIG_ENV = 'SYMDIS_CONFIG'

# Set the default descriptor dimension of the synthetic corpus
DIM = 16

# Set the default number of optimizer steps
STEPS = 2000

# Set the default seed for sampling and initialization
SEED = 0

# Set the default checkpoint cadence in steps; 0 writes only the final checkpoint
CHECKPOINT_EVERY = 0

# Set the default number of torch intra-op threads; one thread keeps reductions reproducible
NUM_THREADS = 1

# Set the default matching feature assembly
MATCH_MODE = 'agno+chi'

# Keys are lowercase identifiers, values run to the end of the line
CONFIG_LINE = re.compile(r'^\s*([a-z][a-z0-9_]*)\s*=\s*(.*?)\s*$')

@dataclass
class RunConfig:

    """
    Settings shared by every command.

    Attributes:
        manifest, mesh_dir, descriptor_dir, annotation_dir, checkpoint, output_dir (str | None): Paths.
        dim (int): Descriptor dimension d.
        lambda_sim, lambda_rec, lambda_bou, lambda_con (float): Loss weights.
        consistency_samples (int): Vertices sampled per step for the consistency loss.
        learning_rate, beta1, beta2, adam_eps (float): Optimizer settings.
        steps (int): Optimizer steps; one shape per step.
        seed (int): Seed for initialization and sampling.
        checkpoint_every (int): Checkpoint cadence in steps.
        omega (float): Potts weight of the refinement MRF.
        match_mode (str): Matching feature assembly.
        alpha (float): Weight of the chirality channel in matching descriptors.
        num_threads (int): torch intra-op threads.
    """

    manifest: str = None
    mesh_dir: str = None
    descriptor_dir: str = None
    annotation_dir: str = None
    checkpoint: str = None
    output_dir: str = None
    dim: int = DIM
    lambda_sim: float = LAMBDA_SIM
    lambda_rec: float = LAMBDA_REC
    lambda_bou: float = LAMBDA_BOU
    lambda_con: float = LAMBDA_CON
    consistency_samples: int = CONSISTENCY_SAMPLES
    learning_rate: float = LEARNING_RATE
    beta1: float = BETA1
    beta2: float = BETA2
    adam_eps: float = ADAM_EPS
    steps: int = STEPS
    seed: int = SEED
    checkpoint_every: int = CHECKPOINT_EVERY
    omega: float = POTTS_WEIGHT
    match_mode: str = MATCH_MODE
    alpha: float = MATCH_ALPHA
    num_threads: int = NUM_THREADS

    def validate(self):

        """
        Checks value ranges.

        Returns:
            RunConfig: self, for chaining.
        """

        if self.dim < 2:
            raise ValidationError(f'dim must be at least 2, got {self.dim}')
        for name in ('steps', 'seed', 'checkpoint_every'):
            if getattr(self, name) < 0:
                raise ValidationError(f'{name} must be non-negative, got {getattr(self, name)}')
        for name in ('consistency_samples', 'num_threads'):
            if getattr(self, name) < 1:
                raise ValidationError(f'{name} must be at least 1, got {getattr(self, name)}')
        for name in ('lambda_sim', 'lambda_rec', 'lambda_bou', 'lambda_con', 'omega', 'alpha'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f'{name} must be finite and non-negative, got {value}')
        for name in ('beta1', 'beta2'):
            if not 0 <= getattr(self, name) < 1:
                raise ValidationError(f'{name} must lie in [0, 1), got {getattr(self, name)}')
        if not (self.learning_rate > 0 and self.adam_eps > 0):
            raise ValidationError('learning_rate and adam_eps must be positive')
        if self.match_mode not in MATCH_MODES:
            raise ValidationError(f'unknown match_mode {self.match_mode!r}; expected one of {", ".join(MATCH_MODES)}')
        return self

    def loss_weights(self):
        return LossWeights(self.lambda_sim, self.lambda_rec, self.lambda_bou, self.lambda_con)

    def require(self, *names):

        """
        Raises a ValidationError naming the first unset setting among `names`.
        """

        for name in names:
            if getattr(self, name) in (None, ''):
                raise ValidationError(f'missing required setting {name}')

def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}

def coerce(key, raw):

    """
    Converts a textual setting to the type of the RunConfig field it names.

    Args:
        key (str): The setting name.
        raw (str): The textual value.

    Returns:
        The converted value.
    """

    types = _field_types()
    if key not in types:
        raise ValidationError(f'unknown setting {key!r}')
    kind = types[key]
    try:
        if kind in (int, 'int'):
            return int(raw)
        if kind in (float, 'float'):
            return float(raw)
    except ValueError:
        raise ValidationError(f'setting {key} expects {getattr(kind, "__name__", kind)}, got {raw!r}')
    return raw

def parse_config_file(path):

    """
    Reads a flat `key = value` file; `#` starts a comment.

    Args:
        path (str | Path): The config file.

    Returns:
        dict: Converted settings in file order.
    """

    path = Path(path)
    if not path.exists():
        raise StorageError(f'config file not found: {path}')
    types = _field_types()
    settings = {}
    with open(path, 'r') as file:
        for number, line in enumerate(file, start=1):
            content = line.split('#', 1)[0]
            if not content.strip():
                continue
            match = CONFIG_LINE.match(content)
            if not match:
                raise FormatError(f'{path}:{number}: expected `key = value`')
            key, raw = match.groups()
            if key not in types:
                raise FormatError(f'{path}:{number}: unknown setting {key!r}')
            try:
                settings[key] = coerce(key, raw)
            except ValidationError as e:
                raise FormatError(f'{path}:{number}: {e}')
    return settings

def build_config(config_path=None, overrides=None):

    """
    Resolves the run configuration: defaults, then the config file (from `config_path`
    or the SYMDIS_CONFIG environment variable), then explicit overrides.

    Args:
        config_path (str | None): Config file path.
        overrides (dict | None): Settings from command-line flags; None values are ignored.

    Returns:
        RunConfig: The validated configuration.
    """

    config = RunConfig()
    config_path = config_path or os.environ.get(CONFIG_ENV)
    if config_path:
        settings = parse_config_file(config_path)
        logger.debug('Loaded %d settings from %s', len(settings), config_path)
        config = replace(config, **settings)
    explicit = {key: value for key, value in (overrides or {}).items() if value is not None}
    unknown = set(explicit) - set(_field_types())
    if unknown:
        raise ValidationError(f'unknown setting {sorted(unknown)[0]!r}')
    return replace(config, **explicit).validate()

@dataclass
class ShapeEntry:

    """
    One shape of a manifest. Paths are as written in the manifest file.
    """

    name: str
    mesh: str
    descriptors: str
    annotations: str = None

@dataclass
class Manifest:

    """
    A list of shapes with the descriptor dimension and generation seed.

    Attributes:
        dim (int): Descriptor dimension d.
        seed (int): Seed the corpus was generated with.
        shapes (list): ShapeEntry items.
        root (Path): Directory the relative paths are resolved against.
    """

    dim: int
    seed: int = 0
    shapes: list = field(default_factory=list)
    root: Path = Path('.')

    def resolve(self, entry, kind, config=None):

        """
        Absolute path of a shape file. A directory override in the config
        (mesh_dir, descriptor_dir, annotation_dir) replaces the manifest directory.

        Returns:
            Path | None: The path, or None for a missing optional annotation file.
        """

        relative = getattr(entry, kind)
        if relative is None:
            return None
        override = getattr(config, {'mesh': 'mesh_dir', 'descriptors': 'descriptor_dir', 'annotations': 'annotation_dir'}[kind], None) if config else None
        return Path(override or self.root) / relative

    def to_dict(self):
        return {
            'dim': self.dim,
            'seed': self.seed,
            'shapes': [{key: value for key, value in vars(entry).items() if value is not None} for entry in self.shapes],
        }

def load_manifest(path):

    """
    Reads a JSON manifest.

    Args:
        path (str | Path): The manifest file.

    Returns:
        Manifest: The manifest, rooted at the file's directory.
    """

    path = Path(path)
    if not path.exists():
        raise StorageError(f'manifest not found: {path}')
    try:
        with open(path, 'r') as file:
            data = json.load(file)
    except json.JSONDecodeError as e:
        raise FormatError(f'{path}:{e.lineno}: invalid JSON: {e.msg}')

    if not isinstance(data, dict) or 'dim' not in data or not isinstance(data.get('shapes'), list):
        raise FormatError(f'{path}: manifest needs "dim" and a "shapes" list')
    shapes = []
    for index, item in enumerate(data['shapes']):
        missing = [key for key in ('name', 'mesh', 'descriptors') if key not in item]
        if missing:
            raise FormatError(f'{path}: shape {index} is missing {", ".join(missing)}')
        shapes.append(ShapeEntry(item['name'], item['mesh'], item['descriptors'], item.get('annotations')))
    names = [entry.name for entry in shapes]
    if len(set(names)) != len(names):
        raise FormatError(f'{path}: duplicate shape names')
    return Manifest(int(data['dim']), int(data.get('seed', 0)), shapes, path.parent)

def save_manifest(path, manifest):

    """
    Writes a manifest as JSON with sorted keys.
    """

    try:
        with open(path, 'w') as file:
            json.dump(manifest.to_dict(), file, sort_keys=True, indent=2)
            file.write('\n')
    except OSError as e:
        raise StorageError(f'cannot write manifest {path}: {e}')
