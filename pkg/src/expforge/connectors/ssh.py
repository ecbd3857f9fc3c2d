"""SSH fan-out connector: configured hosts as ssh-host nodes.

Host lists and credentials come from connector configuration, never from
experiments. All node interaction happens through a runner callable
``(host, command) -> (exit_code, output)`` so the remote-session plumbing can
be swapped out in tests; the default runner shells out to the ``ssh`` binary
in batch mode over an established key-authenticated channel.
"""

from __future__ import annotations

import base64
import logging
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from ..compiler import CLEAN_SCRATCH_COMMAND, EnvironmentSpec
from ..errors import LaunchFailed, NodeUnreachable
from ..model import NodeDescriptor, NodePool
from . import (
    CommandResult,
    Connector,
    ExecutorConfig,
    HEALTH_REACHABLE,
    HEALTH_UNREACHABLE,
    LaunchHandle,
    PrepareResult,
)

log = logging.getLogger("expforge.ssh")

Runner = Callable[["SshHost", str], tuple[int, str]]


@dataclass(frozen=True)
class SshHost:
    host: str
    port: int = 22
    node_id: str = ""
    attributes: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any] | str) -> "SshHost":
        if isinstance(doc, str):
            return cls(host=doc)
        return cls(host=doc["host"], port=int(doc.get("port", 22)),
                   node_id=doc.get("node_id", ""),
                   attributes=dict(doc.get("attributes", {})))


class SshConnector(Connector):
    def __init__(self, name: str = "ssh", hosts: Sequence[SshHost] = (), *,
                 user: str | None = None, key_path: str | None = None,
                 workdir: str = "~/.expforge", connect_timeout_s: int = 10,
                 python: str = "python3", runner: Runner | None = None):
        self.name = name
        self.user = user
        self.key_path = key_path
        self.workdir = workdir
        self.connect_timeout_s = connect_timeout_s
        self.python = python
        self._runner = runner or self._ssh_runner
        self._hosts: dict[str, SshHost] = {}
        for host in hosts:
            node_id = host.node_id or f"{name}-{host.host}"
            if node_id in self._hosts:
                raise ValueError(f"duplicate ssh node id {node_id!r}")
            self._hosts[node_id] = host

    # -- transport -----------------------------------------------------------

    def _ssh_runner(self, host: SshHost, command: str) -> tuple[int, str]:
        argv = ["ssh", "-o", "BatchMode=yes",
                "-o", f"ConnectTimeout={self.connect_timeout_s}"]
        if self.key_path:
            argv += ["-i", self.key_path]
        if host.port != 22:
            argv += ["-p", str(host.port)]
        target = f"{self.user}@{host.host}" if self.user else host.host
        argv += [target, "--", command]
        proc = subprocess.run(argv, stdout=subprocess.PIPE,
                              stderr=subprocess.STDOUT, text=True)
        return proc.returncode, proc.stdout or ""

    def _host(self, node: NodeDescriptor) -> SshHost:
        try:
            return self._hosts[node.node_id]
        except KeyError:
            raise LaunchFailed(
                f"node {node.node_id!r} is not part of {self.name!r}") from None

    def _remote(self, command: str) -> str:
        return f"mkdir -p {self.workdir} && cd {self.workdir} && ({command})"

    # -- connector interface ---------------------------------------------------

    def list_nodes(self) -> NodePool:
        return NodePool(tuple(
            NodeDescriptor(node_id=node_id, kind="ssh-host",
                           attributes=dict(host.attributes),
                           connector_ref=self.name)
            for node_id, host in self._hosts.items()))

    def health(self, node: NodeDescriptor) -> str:
        host = self._host(node)
        code, _ = self._runner(host, "true")
        return HEALTH_REACHABLE if code == 0 else HEALTH_UNREACHABLE

    def prepare(self, node: NodeDescriptor, env: EnvironmentSpec) -> PrepareResult:
        host = self._host(node)
        for command in env.setup_commands:
            code, output = self._runner(host, self._remote(command))
            if code != 0:
                return PrepareResult(False, command, output)
        for staged in env.staged_files:
            encoded = base64.b64encode(staged.content.encode("utf-8")).decode("ascii")
            stage_cmd = (f"mkdir -p $(dirname {shlex.quote(staged.path)}) 2>/dev/null; "
                         f"printf '%s' {encoded} | base64 -d > {shlex.quote(staged.path)}")
            code, output = self._runner(host, self._remote(stage_cmd))
            if code != 0:
                return PrepareResult(False, f"stage-file {staged.path}", output)
        for command in env.verify_commands:
            code, output = self._runner(host, self._remote(command))
            if code != 0:
                return PrepareResult(False, command, output)
        return PrepareResult(True)

    def run_commands(self, node: NodeDescriptor,
                     commands: Sequence[str]) -> list[CommandResult]:
        host = self._host(node)
        results = []
        for command in commands:
            effective = ("rm -rf ./* ./.spool 2>/dev/null; true"
                         if command == CLEAN_SCRATCH_COMMAND else command)
            code, output = self._runner(host, self._remote(effective))
            results.append(CommandResult(command, code, output))
        return results

    def launch_executor(self, node: NodeDescriptor,
                        config: ExecutorConfig) -> LaunchHandle:
        if not config.gateway_url:
            raise LaunchFailed("ssh connector needs a gateway HTTP endpoint")
        host = self._host(node)
        if self.health(node) != HEALTH_REACHABLE:
            raise NodeUnreachable(f"{node.node_id} did not answer")
        env_assignments = " ".join(
            f"{key}={shlex.quote(value)}" for key, value in {
                "EXPFORGE_GATEWAY": config.gateway_url,
                "EXPFORGE_EXPERIMENT_ID": config.experiment_id,
                "EXPFORGE_NODE_ID": config.node_id,
                "EXPFORGE_SCRATCH": ".",
                "EXPFORGE_SPOOL": "./.spool",
                "EXPFORGE_POLL_INTERVAL": str(config.flag_poll_interval),
                **config.extra_env,
            }.items())
        launch = (f"{env_assignments} nohup {self.python} -m expforge.executor "
                  f">/dev/null 2>&1 & echo $!")
        code, output = self._runner(host, self._remote(launch))
        if code != 0:
            raise LaunchFailed(
                f"executor launch on {node.node_id} failed: {output}")
        pid = output.strip().splitlines()[-1] if output.strip() else ""
        return LaunchHandle(node_id=node.node_id,
                            experiment_id=config.experiment_id, process=pid)

    def stop_executor(self, handle: LaunchHandle) -> None:
        host = self._hosts.get(handle.node_id)
        if host is None or not handle.process:
            return
        self._runner(host, f"kill {handle.process} 2>/dev/null || true")
