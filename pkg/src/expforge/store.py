"""Experiment records and their pluggable persistence.

Two stores ship with the platform: an in-memory store for tests and a
file-backed store (one JSON document per experiment, atomic replace via
rename) as the self-contained default. Store operations are atomic per
record; serializing writers per experiment is the director's job.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import DuplicateExperimentName, InvalidTransition, UnknownExperiment
from .model import Status, is_valid_transition

# Per-node deployment states
DEPLOY_PENDING = "pending"
DEPLOY_PREPARED = "prepared"
DEPLOY_FAILED = "prepare-failed"

# Per-node execution states
EXEC_IDLE = "idle"
EXEC_RUNNING = "running"
EXEC_REPORTED = "reported"
EXEC_UNREACHABLE = "unreachable"
EXEC_TIMED_OUT = "timed-out"

TERMINAL_EXEC_STATES = frozenset({EXEC_REPORTED, EXEC_UNREACHABLE, EXEC_TIMED_OUT})


@dataclass
class ExperimentRecord:
    """Everything the director persists about one experiment.

    ``transition`` is the only way the status changes; it enforces the
    lifecycle relation and appends to the transition log so recovery and the
    property tests can audit every persisted edge.
    """

    experiment_id: str
    experiment_doc: dict
    status: Status = Status.SUBMITTED
    created_at: float = field(default_factory=time.time)
    transitions: list[dict] = field(default_factory=list)
    deploy_state: dict[str, dict] = field(default_factory=dict)
    exec_state: dict[str, dict] = field(default_factory=dict)
    plan_doc: dict | None = None
    results: list[dict] = field(default_factory=list)
    reports: dict[str, dict] = field(default_factory=dict)
    flags: dict[str, dict] = field(default_factory=dict)
    errors: list[dict] = field(default_factory=list)
    cleanup: dict[str, dict] = field(default_factory=dict)
    deadline_wall: float | None = None

    def transition(self, to: Status, at: float | None = None) -> None:
        to = Status(to)
        if not is_valid_transition(self.status, to):
            raise InvalidTransition(
                f"{self.experiment_id}: {self.status.value} -> {to.value}")
        self.transitions.append({
            "from": self.status.value,
            "to": to.value,
            "at": at if at is not None else time.time(),
        })
        self.status = to

    # -- per-node state helpers ----------------------------------------------

    def node_deploy(self, node_id: str) -> dict:
        return self.deploy_state.setdefault(node_id, {"state": DEPLOY_PENDING})

    def node_exec(self, node_id: str) -> dict:
        return self.exec_state.setdefault(node_id, {"state": EXEC_IDLE})

    def prepared_nodes(self) -> list[str]:
        return [n for n, s in self.deploy_state.items()
                if s.get("state") == DEPLOY_PREPARED]

    def pending_execution(self) -> list[str]:
        """Prepared nodes that have not reached a terminal execution state."""
        return [n for n in self.prepared_nodes()
                if self.exec_state.get(n, {}).get("state")
                not in TERMINAL_EXEC_STATES]

    def to_doc(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "experiment_doc": self.experiment_doc,
            "status": self.status.value,
            "created_at": self.created_at,
            "transitions": self.transitions,
            "deploy_state": self.deploy_state,
            "exec_state": self.exec_state,
            "plan_doc": self.plan_doc,
            "results": self.results,
            "reports": self.reports,
            "flags": self.flags,
            "errors": self.errors,
            "cleanup": self.cleanup,
            "deadline_wall": self.deadline_wall,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "ExperimentRecord":
        return cls(
            experiment_id=doc["experiment_id"],
            experiment_doc=doc["experiment_doc"],
            status=Status(doc["status"]),
            created_at=doc.get("created_at", 0.0),
            transitions=list(doc.get("transitions", ())),
            deploy_state=dict(doc.get("deploy_state", {})),
            exec_state=dict(doc.get("exec_state", {})),
            plan_doc=doc.get("plan_doc"),
            results=list(doc.get("results", ())),
            reports=dict(doc.get("reports", {})),
            flags=dict(doc.get("flags", {})),
            errors=list(doc.get("errors", ())),
            cleanup=dict(doc.get("cleanup", {})),
            deadline_wall=doc.get("deadline_wall"),
        )


class Store:
    """Persistence interface. All operations are atomic per record."""

    def create(self, record: ExperimentRecord) -> None:
        raise NotImplementedError

    def load(self, experiment_id: str) -> ExperimentRecord:
        raise NotImplementedError

    def save(self, record: ExperimentRecord) -> None:
        raise NotImplementedError

    def list_ids(self) -> list[str]:
        raise NotImplementedError

    def exists(self, experiment_id: str) -> bool:
        try:
            self.load(experiment_id)
            return True
        except UnknownExperiment:
            return False


class MemoryStore(Store):
    def __init__(self):
        self._docs: dict[str, str] = {}
        self._lock = threading.Lock()

    def create(self, record: ExperimentRecord) -> None:
        with self._lock:
            if record.experiment_id in self._docs:
                raise DuplicateExperimentName(
                    f"experiment name {record.experiment_id!r} already exists")
            self._docs[record.experiment_id] = json.dumps(record.to_doc())

    def load(self, experiment_id: str) -> ExperimentRecord:
        with self._lock:
            doc = self._docs.get(experiment_id)
        if doc is None:
            raise UnknownExperiment(f"unknown experiment {experiment_id!r}")
        return ExperimentRecord.from_doc(json.loads(doc))

    def save(self, record: ExperimentRecord) -> None:
        with self._lock:
            self._docs[record.experiment_id] = json.dumps(record.to_doc())

    def list_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._docs)


class FileStore(Store):
    """One JSON file per experiment under ``root``; writes go through a
    temp file + rename so readers never observe a torn record."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, experiment_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else "_"
                       for c in experiment_id)
        return self.root / f"{safe}.json"

    def create(self, record: ExperimentRecord) -> None:
        with self._lock:
            path = self._path(record.experiment_id)
            if path.exists():
                raise DuplicateExperimentName(
                    f"experiment name {record.experiment_id!r} already exists")
            self._write(path, record)

    def load(self, experiment_id: str) -> ExperimentRecord:
        path = self._path(experiment_id)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise UnknownExperiment(
                f"unknown experiment {experiment_id!r}") from None
        return ExperimentRecord.from_doc(json.loads(text))

    def save(self, record: ExperimentRecord) -> None:
        with self._lock:
            self._write(self._path(record.experiment_id), record)

    def _write(self, path: Path, record: ExperimentRecord) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                json.dump(record.to_doc(), handle)
                handle.flush()
                os.fsync(handle.fileno())
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise

    def list_ids(self) -> list[str]:
        ids = []
        for path in sorted(self.root.glob("*.json")):
            if path.name.startswith(".tmp-"):
                continue
            try:
                ids.append(json.loads(path.read_text(encoding="utf-8"))["experiment_id"])
            except (json.JSONDecodeError, KeyError):
                continue
        return ids
