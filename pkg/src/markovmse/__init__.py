"""Population size estimation from overlapping lists with continuous-time
Markov chain models, alongside classical log-linear models."""

__version__ = "0.1.0"

from .liststate import ContingencyTable, load_dataset, parse_table, read_table
from .generator import MarkovParams, ModelSpec, build_generator
from .matexp import cell_probabilities
from .likelihood import FitResult, fit, profile_ci, wald_ci
from .loglinear import LogLinearSpec, ll_fit
from .selection import SelectionStrategy, stepwise

__all__ = [
    "ContingencyTable",
    "FitResult",
    "LogLinearSpec",
    "MarkovParams",
    "ModelSpec",
    "SelectionStrategy",
    "build_generator",
    "cell_probabilities",
    "fit",
    "ll_fit",
    "load_dataset",
    "parse_table",
    "profile_ci",
    "read_table",
    "stepwise",
    "wald_ci",
]
