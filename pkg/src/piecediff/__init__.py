"""Diffusion-based assembly of 2D jigsaw puzzles and 3D fractured objects."""

from .config import RunConfig, load_config, with_overrides
from .data import (FragmentSet, PuzzleInstance, fragment_corpus, generate_fragments, generate_puzzle,
                   puzzle_corpus, read_dataset, shuffle_instance, write_dataset)
from .errors import (ConfigError, DatasetFormatError, DimensionError, DivergenceError, DomainError,
                     EmptyInputError, InvalidRotationError)
from .evaluate import evaluate
from .model import AssemblyModel, NetworkPredictor, OraclePredictor
from .sampler import Solution, solve
from .train import train

__version__ = "0.1.0"
