"""Compile a validated experiment into a deployment plan.

The plan carries one deduplicated environment spec per distinct
(pipeline digest, node kind) pair, a per-node execution bundle, and cleanup
command sequences per node kind. Compilation is a pure function: identical
experiment and registry yield a byte-identical plan document.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from .errors import ValidationFailed
from .model import (
    EnvironmentRequirement,
    Experiment,
    StagedFile,
    canonical_json,
    merge_requirements,
    validate_experiment,
)
from .registry import TaskRegistry

# Connector-interpreted token: wipe the node's scratch area. Kept symbolic so
# every connector (local dir, ssh workdir, simulated virtual fs) can implement
# it natively instead of trusting an rm -rf string.
CLEAN_SCRATCH_COMMAND = "expforge-clean-scratch"

DEFAULT_REPORT_RETRY = {"base_delay_s": 1.0, "factor": 2.0, "max_attempts": 5}


@dataclass(frozen=True)
class EnvironmentSpec:
    """Setup and verification for one (pipeline digest, node kind) pair."""

    pipeline_digest: str
    node_kind: str
    setup_commands: tuple[str, ...] = ()
    staged_files: tuple[StagedFile, ...] = ()
    verify_commands: tuple[str, ...] = ()

    @property
    def key(self) -> tuple[str, str]:
        return (self.pipeline_digest, self.node_kind)

    def to_doc(self) -> dict:
        return {
            "pipeline_digest": self.pipeline_digest,
            "node_kind": self.node_kind,
            "setup_commands": list(self.setup_commands),
            "staged_files": [f.to_doc() for f in self.staged_files],
            "verify_commands": list(self.verify_commands),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "EnvironmentSpec":
        return cls(
            pipeline_digest=doc["pipeline_digest"],
            node_kind=doc["node_kind"],
            setup_commands=tuple(doc.get("setup_commands", ())),
            staged_files=tuple(StagedFile.from_doc(f)
                               for f in doc.get("staged_files", ())),
            verify_commands=tuple(doc.get("verify_commands", ())),
        )


def merge_environments(reqs: Sequence[EnvironmentRequirement]) -> EnvironmentRequirement:
    """Stage-ordered union of requirements; see :func:`model.merge_requirements`.

    Binary requirements fold into verify commands when specs are built, so the
    merged body is directly executable by a connector.
    """
    return merge_requirements(reqs)


def resolve_implementation(task_type: str, kind: str,
                           registry: TaskRegistry) -> str:
    """Preferred implementation id for (task_type, kind); deterministic."""
    return registry.resolve(task_type, kind)


@dataclass(frozen=True)
class DeploymentPlan:
    environment_specs: tuple[EnvironmentSpec, ...]
    node_bundles: Mapping[str, dict]
    cleanup_commands: Mapping[str, tuple[str, ...]]

    def spec_for(self, pipeline_digest: str, kind: str) -> EnvironmentSpec:
        for spec in self.environment_specs:
            if spec.key == (pipeline_digest, kind):
                return spec
        raise KeyError((pipeline_digest, kind))

    def bundle_for(self, node_id: str) -> dict:
        return self.node_bundles[node_id]

    def to_doc(self) -> dict:
        return {
            "environment_specs": [s.to_doc() for s in self.environment_specs],
            "node_bundles": {n: dict(b) for n, b in self.node_bundles.items()},
            "cleanup_commands": {k: list(v)
                                 for k, v in self.cleanup_commands.items()},
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "DeploymentPlan":
        return cls(
            environment_specs=tuple(EnvironmentSpec.from_doc(s)
                                    for s in doc.get("environment_specs", ())),
            node_bundles=dict(doc.get("node_bundles", {})),
            cleanup_commands={k: tuple(v) for k, v in
                              doc.get("cleanup_commands", {}).items()},
        )

    def canonical(self) -> str:
        return canonical_json(self.to_doc())


def _environment_body(pipeline, kind: str,
                      registry: TaskRegistry) -> EnvironmentRequirement:
    reqs: list[EnvironmentRequirement] = []
    for stage in pipeline.stages:
        for task in stage.tasks:
            impl = registry.implementation(registry.resolve(task.task_type, kind))
            reqs.append(impl.environment)
            reqs.append(task.environment)
    return merge_environments(reqs)


def _binary_verify_command(name: str) -> str:
    return f"command -v {name}"


def compile_experiment(exp: Experiment, registry: TaskRegistry) -> DeploymentPlan:
    """Build the deployment plan for a validated experiment.

    Raises :class:`ValidationFailed` when the experiment does not validate,
    and :class:`UnsupportedTaskForKind` / :class:`EnvironmentConflict` if the
    registry changed underneath the validator.
    """
    issues = validate_experiment(exp, registry)
    if issues:
        raise ValidationFailed(issues)

    specs: dict[tuple[str, str], EnvironmentSpec] = {}
    bundles: dict[str, dict] = {}
    cleanup: dict[str, list[str]] = {}

    for assignment in exp.assignments:
        pipeline = assignment.pipeline
        pipeline_doc = pipeline.to_doc()
        pipeline_digest = pipeline.digest()
        for node in assignment.nodes:
            key = (pipeline_digest, node.kind)
            impl_ids = {
                task.name: resolve_implementation(task.task_type, node.kind, registry)
                for stage in pipeline.stages for task in stage.tasks
            }
            if key not in specs:
                body = _environment_body(pipeline, node.kind, registry)
                verify = list(body.verify_commands)
                for binary in body.binaries:
                    probe = _binary_verify_command(binary.name)
                    if probe not in verify:
                        verify.append(probe)
                specs[key] = EnvironmentSpec(
                    pipeline_digest=pipeline_digest,
                    node_kind=node.kind,
                    setup_commands=body.setup_commands,
                    staged_files=body.staged_files,
                    verify_commands=tuple(verify),
                )
            kind_cleanup = cleanup.setdefault(node.kind, [])
            for impl_id in impl_ids.values():
                for cmd in registry.implementation(impl_id).cleanup_commands:
                    if cmd not in kind_cleanup:
                        kind_cleanup.append(cmd)
            bundles[node.node_id] = {
                "experiment_id": exp.experiment_id,
                "node_id": node.node_id,
                "node_kind": node.kind,
                "pipeline": pipeline_doc,
                "pipeline_digest": pipeline_digest,
                "impl_ids": impl_ids,
                "early_stop": pipeline.early_stop,
                "report_retry": dict(DEFAULT_REPORT_RETRY),
            }

    for kind in cleanup:
        if CLEAN_SCRATCH_COMMAND not in cleanup[kind]:
            cleanup[kind].append(CLEAN_SCRATCH_COMMAND)

    return DeploymentPlan(
        environment_specs=tuple(specs.values()),
        node_bundles=bundles,
        cleanup_commands={k: tuple(v) for k, v in cleanup.items()},
    )


# Spec-facing alias; "compile" shadows a builtin, so the module-level name
# carries the noun.
compile = compile_experiment
