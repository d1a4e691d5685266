"""Syntax-guided paraphrase generation with a numpy autodiff core."""

from .cli import run
from .model import ExpanderModel, GeneratorModel, ModelConfig, load_checkpoint, save_checkpoint
from .tree import LinearParse, ParseTree, delinearize, linearize, parse_bracketed, to_bracketed

__all__ = [
    "ExpanderModel",
    "GeneratorModel",
    "LinearParse",
    "ModelConfig",
    "ParseTree",
    "delinearize",
    "linearize",
    "load_checkpoint",
    "parse_bracketed",
    "run",
    "save_checkpoint",
    "to_bracketed",
]

__version__ = "0.1.0"
