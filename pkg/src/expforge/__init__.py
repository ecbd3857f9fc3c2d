"""expforge: distributed data-collection experiment orchestration.

Experimenters declare pipelines of tasks mapped onto filtered node pools;
the platform compiles, deploys, executes, and collects results across
heterogeneous infrastructures through pluggable connectors, with
node-resident executors providing stage-barrier semantics and a single
end-of-pipeline report.
"""

from .compiler import DeploymentPlan, EnvironmentSpec, compile_experiment
from .director import Director
from .errors import ExpforgeError
from .model import (
    EnvironmentRequirement,
    Experiment,
    NodeDescriptor,
    NodePool,
    Outcome,
    Pipeline,
    Policies,
    Stage,
    Status,
    TaskResult,
    TaskSpec,
    validate_experiment,
)
from .registry import TaskImplementation, TaskRegistry
from .store import FileStore, MemoryStore
from .tasks import builtin_registry

__version__ = "0.1.0"

__all__ = [
    "DeploymentPlan",
    "Director",
    "EnvironmentRequirement",
    "EnvironmentSpec",
    "Experiment",
    "ExpforgeError",
    "FileStore",
    "MemoryStore",
    "NodeDescriptor",
    "NodePool",
    "Outcome",
    "Pipeline",
    "Policies",
    "Stage",
    "Status",
    "TaskImplementation",
    "TaskRegistry",
    "TaskResult",
    "TaskSpec",
    "builtin_registry",
    "compile_experiment",
    "validate_experiment",
    "__version__",
]
