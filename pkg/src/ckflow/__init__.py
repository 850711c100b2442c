"""Research projects as a file-based database of components with unified actions.

Main entry points:

* :func:`init_registry` / :class:`Registry` - repositories and components on disk
* :class:`Kernel` - ``access({"action": ..., "module_uoa": ...})`` dispatch
* :mod:`ckflow.pipeline` - build, run and benchmark programs
* :mod:`ckflow.experiments` - records, replay, Pareto frontiers, reports
* :mod:`ckflow.autotune` - design-space exploration
"""

from .actions import Kernel, access
from .errors import CKError
from .experiments import ExperimentPoint, FrontierQuery, pareto_frontier
from .registry import SAMPLES_PATH, Component, ComponentRef, Registry, init_registry

__all__ = [
    "CKError",
    "Component",
    "ComponentRef",
    "ExperimentPoint",
    "FrontierQuery",
    "Kernel",
    "Registry",
    "SAMPLES_PATH",
    "access",
    "init_registry",
    "pareto_frontier",
]

__version__ = "0.1.0"
