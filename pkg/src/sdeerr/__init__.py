"""Error rates for functionals of SDE approximations."""
from . import bounds, distribution, experiments, functionals, rng, sde
from ._backend import get_backend
from .sde import Partition, SchemeTag, SdeSpec

__version__ = "0.1.0"

__all__ = [
    "Partition", "SchemeTag", "SdeSpec",
    "bounds", "distribution", "experiments", "functionals", "get_backend", "rng", "sde",
]
