"""Collective reasoning-path search over ensembles of policy models."""

from .backends import (
    GenerationResult,
    PolicyBackend,
    PolicyDescriptor,
    SimProfile,
    make_backend,
    make_ensemble,
)
from .dataset_io import QuestionRecord, SearchRecord, StepStats
from .engine import SearchConfig, SearchOutcome, search
from .reflection import ReflectivePath, build_reflective_path, negative_sibling
from .tree import ReasoningNode, ReasoningTree

__version__ = "0.1.0"

__all__ = [
    "GenerationResult",
    "PolicyBackend",
    "PolicyDescriptor",
    "QuestionRecord",
    "ReasoningNode",
    "ReasoningTree",
    "ReflectivePath",
    "SearchConfig",
    "SearchOutcome",
    "SearchRecord",
    "SimProfile",
    "StepStats",
    "build_reflective_path",
    "make_backend",
    "make_ensemble",
    "negative_sibling",
    "search",
]
