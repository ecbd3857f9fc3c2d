"""Connector interface: one uniform surface over every deployment backend.

A connector owns a namespace of nodes, knows how to prepare their
environments, and can launch/stop executors on them. Connectors are stateless
between calls apart from launch handles, and must be safely shareable across
threads; the director serializes per-node calls, calls for distinct nodes may
run concurrently.

Connector instances are configuration-driven: a structured config file names
each instance, its type, and its parameters (see :func:`load_connectors`).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence, TYPE_CHECKING

import yaml

from ..compiler import CLEAN_SCRATCH_COMMAND, EnvironmentSpec
from ..errors import ConnectorUnavailable
from ..model import NodeDescriptor, NodePool

if TYPE_CHECKING:  # pragma: no cover
    from ..registry import TaskRegistry

HEALTH_REACHABLE = "reachable"
HEALTH_UNREACHABLE = "unreachable"


@dataclass(frozen=True)
class PrepareResult:
    """Outcome of environment preparation on one node.

    ``prepared`` is True only when every setup and verify command exited 0;
    otherwise the first failing command and its output are carried along.
    """

    prepared: bool
    failed_command: str | None = None
    output: str | None = None

    def to_doc(self) -> dict:
        return {"prepared": self.prepared,
                "failed_command": self.failed_command,
                "output": self.output}


@dataclass(frozen=True)
class CommandResult:
    command: str
    exit_code: int
    output: str = ""


@dataclass
class ExecutorConfig:
    """What a connector needs to start an executor for one node."""

    experiment_id: str
    node_id: str
    gateway_url: str | None = None
    gateway_client: Any = None
    registry: "TaskRegistry | None" = None
    bundle_doc: dict | None = None
    flag_poll_interval: float = 0.5
    extra_env: dict[str, str] = field(default_factory=dict)


@dataclass
class LaunchHandle:
    """Opaque executor handle; ``stop`` is best-effort."""

    node_id: str
    experiment_id: str
    stop_event: threading.Event | None = None
    process: Any = None
    thread: threading.Thread | None = None


class Connector:
    """Abstract deployment-system adapter."""

    name: str

    def list_nodes(self) -> NodePool:
        raise NotImplementedError

    def prepare(self, node: NodeDescriptor, env: EnvironmentSpec) -> PrepareResult:
        raise NotImplementedError

    def run_commands(self, node: NodeDescriptor,
                     commands: Sequence[str]) -> list[CommandResult]:
        """Run cleanup-style commands on the node; never raises per-command."""
        raise NotImplementedError

    def launch_executor(self, node: NodeDescriptor,
                        config: ExecutorConfig) -> LaunchHandle:
        raise NotImplementedError

    def stop_executor(self, handle: LaunchHandle) -> None:
        raise NotImplementedError

    def health(self, node: NodeDescriptor) -> str:
        return HEALTH_REACHABLE


def load_connectors(source: str | Path | Mapping[str, Any]) -> dict[str, Connector]:
    """Build named connector instances from a config document or file.

    The document shape::

        connectors:
          - name: sim
            type: simulated
            params: {nodes: 20, seed: 7, attributes: {location: campus}}
          - name: local
            type: local
            params: {workdir: /tmp/expforge-nodes}
          - name: lab
            type: ssh
            params: {user: probe, key_path: ~/.ssh/id_ed25519,
                     hosts: [{host: probe1.example.net}]}
    """
    from .local import LocalConnector
    from .simulated import FaultModel, SimulatedConnector
    from .ssh import SshConnector, SshHost

    if isinstance(source, (str, Path)):
        doc = yaml.safe_load(Path(source).read_text(encoding="utf-8"))
    else:
        doc = dict(source)
    entries = doc.get("connectors")
    if not isinstance(entries, list) or not entries:
        raise ConnectorUnavailable("config declares no connectors")

    connectors: dict[str, Connector] = {}
    for entry in entries:
        name = entry.get("name")
        kind = entry.get("type")
        params = dict(entry.get("params", {}))
        if not name or name in connectors:
            raise ConnectorUnavailable(f"bad or duplicate connector name {name!r}")
        if kind == "simulated":
            fault = FaultModel.from_doc(params.pop("fault", {}))
            connectors[name] = SimulatedConnector(
                name=name,
                node_count=int(params.pop("nodes", 1)),
                attributes=params.pop("attributes", {}),
                per_node_attributes=params.pop("per_node_attributes", None),
                seed=int(params.pop("seed", 0)),
                fault=fault,
            )
        elif kind == "local":
            connectors[name] = LocalConnector(
                name=name,
                workdir=params.pop("workdir", None),
                attributes=params.pop("attributes", {}),
            )
        elif kind == "ssh":
            hosts = [SshHost.from_doc(h) for h in params.pop("hosts", [])]
            connectors[name] = SshConnector(
                name=name,
                hosts=hosts,
                user=params.pop("user", None),
                key_path=params.pop("key_path", None),
                workdir=params.pop("workdir", "~/.expforge"),
            )
        else:
            raise ConnectorUnavailable(f"unknown connector type {kind!r}")
    return connectors


__all__ = [
    "CLEAN_SCRATCH_COMMAND",
    "CommandResult",
    "Connector",
    "ExecutorConfig",
    "HEALTH_REACHABLE",
    "HEALTH_UNREACHABLE",
    "LaunchHandle",
    "PrepareResult",
    "load_connectors",
]
