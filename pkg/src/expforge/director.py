"""Mediation service: experiment lifecycle, persistence, orchestration.

The director owns every experiment record. All record mutation funnels
through one re-entrant lock per experiment (one logical writer, many
readers); the gateway's ingestion path uses the same lock, so reports,
flags, and lifecycle moves never race. deploy() and execute() return as
soon as the corresponding transition is persisted and the real work
proceeds on background threads; clients poll status().

Restarting a director over the same store recovers every record unchanged:
in-flight deployments resume preparing only still-pending nodes, RUNNING
experiments re-poll nodes that already hold an execution token and launch
only tokenless ones; execution is at-most-once per (experiment, node).
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Iterator, Mapping

from .compiler import DeploymentPlan, compile_experiment
from .connectors import (
    Connector,
    ExecutorConfig,
    HEALTH_REACHABLE,
    LaunchHandle,
)
from .errors import (
    AlreadyTerminal,
    ConnectorUnavailable,
    EnvironmentConflict,
    ExpforgeError,
    InvalidTransition,
    NotReady,
    UnsupportedTaskForKind,
    ValidationFailed,
)
from .gateway import Gateway, InProcessGatewayClient
from .model import (
    Experiment,
    NodeDescriptor,
    NodePool,
    Policies,
    Status,
    TERMINAL_STATUSES,
    validate_experiment,
)
from .registry import TaskRegistry
from .store import (
    DEPLOY_FAILED,
    DEPLOY_PENDING,
    DEPLOY_PREPARED,
    EXEC_RUNNING,
    EXEC_UNREACHABLE,
    EXEC_TIMED_OUT,
    ExperimentRecord,
    Store,
)

log = logging.getLogger("expforge.director")


class Director:
    def __init__(self, store: Store, registry: TaskRegistry,
                 connectors: Mapping[str, Connector], *,
                 gateway_url: str | None = None,
                 artifact_root=None,
                 flag_poll_interval: float = 0.5,
                 monitor_poll_s: float = 0.25,
                 prepare_workers: int = 8,
                 recover: bool = True):
        self.store = store
        self.registry = registry
        self.connectors = dict(connectors)
        self.gateway_url = gateway_url
        self.flag_poll_interval = flag_poll_interval
        self.monitor_poll_s = monitor_poll_s
        self.prepare_workers = prepare_workers
        self.gateway = Gateway(self, artifact_root=artifact_root)

        self._locks: dict[str, threading.RLock] = {}
        self._locks_guard = threading.Lock()
        self._completion: dict[str, threading.Condition] = {}
        self._completion_guard = threading.Lock()
        self._handles: dict[tuple[str, str], tuple[Connector, LaunchHandle]] = {}
        self._handles_guard = threading.Lock()
        self._monitored: set[str] = set()
        self._closed = threading.Event()
        if recover:
            self.recover()

    # ------------------------------------------------------------------
    # record access
    # ------------------------------------------------------------------

    def _lock_for(self, experiment_id: str) -> threading.RLock:
        with self._locks_guard:
            return self._locks.setdefault(experiment_id, threading.RLock())

    def _completion_cond(self, experiment_id: str) -> threading.Condition:
        with self._completion_guard:
            return self._completion.setdefault(experiment_id,
                                               threading.Condition())

    def record(self, experiment_id: str) -> ExperimentRecord:
        """Read-only snapshot; raises UnknownExperiment."""
        return self.store.load(experiment_id)

    @contextmanager
    def mutate(self, experiment_id: str) -> Iterator[ExperimentRecord]:
        """Load-modify-save under the experiment's ownership lock."""
        with self._lock_for(experiment_id):
            record = self.store.load(experiment_id)
            yield record
            self.store.save(record)

    def notify_completion(self, experiment_id: str) -> None:
        cond = self._completion_cond(experiment_id)
        with cond:
            cond.notify_all()

    # ------------------------------------------------------------------
    # experimenter-facing operations
    # ------------------------------------------------------------------

    def submit(self, exp: Experiment) -> str:
        issues = validate_experiment(exp, self.registry)
        if issues:
            raise ValidationFailed(issues)
        record = ExperimentRecord(experiment_id=exp.experiment_id,
                                  experiment_doc=exp.to_doc())
        self.store.create(record)
        log.info("experiment %s submitted (%d assignments, %d nodes)",
                 exp.experiment_id, len(exp.assignments),
                 len(exp.assigned_node_ids()))
        return exp.experiment_id

    def deploy(self, experiment_id: str) -> None:
        """Compile and distribute in the background; idempotent while a
        deployment is in flight or already READY."""
        with self.mutate(experiment_id) as record:
            if record.status in (Status.COMPILING, Status.DEPLOYING,
                                 Status.READY):
                return
            if record.status is not Status.SUBMITTED:
                raise InvalidTransition(
                    f"deploy requires SUBMITTED, {experiment_id} is "
                    f"{record.status.value}")
            record.transition(Status.COMPILING)
        self._spawn(self._deploy_worker, experiment_id,
                    name=f"deploy-{experiment_id}")

    def execute(self, experiment_id: str) -> None:
        """Launch executors on every prepared node; idempotent while RUNNING."""
        with self.mutate(experiment_id) as record:
            if record.status is Status.RUNNING:
                return
            if record.status is not Status.READY:
                raise NotReady(
                    f"execute requires READY, {experiment_id} is "
                    f"{record.status.value}")
            policies = Policies.from_doc(
                record.experiment_doc.get("policies", {}))
            record.deadline_wall = time.time() + policies.experiment_timeout_s
            record.transition(Status.RUNNING)
        self._spawn(self._execute_worker, experiment_id,
                    name=f"execute-{experiment_id}")

    def status(self, experiment_id: str) -> dict:
        """Read-only snapshot view of one experiment record."""
        record = self.record(experiment_id)
        nodes = {}
        for node_id, deploy in record.deploy_state.items():
            execution = record.exec_state.get(node_id, {})
            entry = {"deploy": deploy.get("state", DEPLOY_PENDING),
                     "execution": execution.get("state", "idle")}
            if deploy.get("failed_command"):
                entry["failed_command"] = deploy["failed_command"]
            if execution.get("late"):
                entry["late"] = True
            nodes[node_id] = entry
        return {
            "experiment_id": record.experiment_id,
            "status": record.status.value,
            "created_at": record.created_at,
            "policies": record.experiment_doc.get("policies", {}),
            "transitions": list(record.transitions),
            "nodes": nodes,
            "prepared_count": len(record.prepared_nodes()),
            "reported_count": len(record.reports),
            "result_count": len(record.results),
            "errors": list(record.errors),
            "deadline_wall": record.deadline_wall,
            "cleanup": dict(record.cleanup),
        }

    def results(self, experiment_id: str) -> dict:
        """All task results received so far, grouped by pipeline and node."""
        record = self.record(experiment_id)
        node_pipeline: dict[str, str] = {}
        for assignment in record.experiment_doc.get("assignments", ()):
            pid = assignment["pipeline"]["pipeline_id"]
            for node in assignment["nodes"]:
                node_pipeline[node["node_id"]] = pid
        grouped: dict[str, dict[str, list[dict]]] = {}
        for result in record.results:
            pid = node_pipeline.get(result.get("node_id", ""), "?")
            grouped.setdefault(pid, {}).setdefault(
                result["node_id"], []).append(dict(result))
        return {
            "experiment_id": record.experiment_id,
            "status": record.status.value,
            "pipelines": grouped,
        }

    def cancel(self, experiment_id: str) -> None:
        with self.mutate(experiment_id) as record:
            if record.status in TERMINAL_STATUSES:
                raise AlreadyTerminal(
                    f"{experiment_id} is already {record.status.value}")
            record.transition(Status.CANCELLED)
        self._stop_handles(experiment_id)
        self.notify_completion(experiment_id)
        log.info("experiment %s cancelled", experiment_id)

    def cleanup(self, experiment_id: str) -> dict:
        """Run the plan's cleanup commands on every prepared node."""
        record = self.record(experiment_id)
        if record.status not in TERMINAL_STATUSES:
            raise InvalidTransition(
                f"cleanup requires a terminal status, {experiment_id} is "
                f"{record.status.value}")
        outcomes: dict[str, dict] = {}
        plan_doc = record.plan_doc or {}
        cleanup_commands = plan_doc.get("cleanup_commands", {})
        for node in self._nodes_of(record):
            if record.deploy_state.get(node.node_id, {}).get("state") \
                    != DEPLOY_PREPARED:
                continue
            commands = cleanup_commands.get(node.kind, ())
            connector = self.connectors.get(node.connector_ref)
            if connector is None:
                outcomes[node.node_id] = {"ok": False,
                                          "error": "connector missing"}
                continue
            try:
                results = connector.run_commands(node, commands)
            except ExpforgeError as exc:
                outcomes[node.node_id] = {"ok": False, "error": str(exc)}
                continue
            failed = [r for r in results if r.exit_code != 0]
            outcomes[node.node_id] = (
                {"ok": True} if not failed else
                {"ok": False, "failed_command": failed[0].command,
                 "output": failed[0].output})
        with self.mutate(experiment_id) as record:
            record.cleanup = outcomes
            record.flags.clear()
        self.gateway.drop_flags(experiment_id)
        return outcomes

    # ------------------------------------------------------------------
    # node pool queries
    # ------------------------------------------------------------------

    def query_nodes(self, filters: Mapping[str, str] | None = None,
                    connector: str | None = None) -> NodePool:
        names = [connector] if connector else sorted(self.connectors)
        nodes: list[NodeDescriptor] = []
        for name in names:
            conn = self.connectors.get(name)
            if conn is None:
                raise ConnectorUnavailable(f"unknown connector {name!r}")
            pool = conn.list_nodes()
            for key, value in (filters or {}).items():
                pool = pool.filter(key, value)
            nodes.extend(pool)
        return NodePool(tuple(nodes))

    # ------------------------------------------------------------------
    # background workers
    # ------------------------------------------------------------------

    def _spawn(self, target, *args, name: str) -> None:
        thread = threading.Thread(target=self._guarded, args=(target, *args),
                                  daemon=True, name=name)
        thread.start()

    def _guarded(self, target, *args) -> None:
        try:
            target(*args)
        except Exception:  # noqa: BLE001 - workers must never kill the service
            log.exception("background worker %s failed", target.__name__)

    def _nodes_of(self, record: ExperimentRecord) -> list[NodeDescriptor]:
        return [NodeDescriptor.from_doc(n)
                for a in record.experiment_doc.get("assignments", ())
                for n in a.get("nodes", ())]

    def _deploy_worker(self, experiment_id: str) -> None:
        record = self.record(experiment_id)
        if record.status is Status.COMPILING:
            exp = Experiment.from_doc(record.experiment_doc)
            try:
                plan = compile_experiment(exp, self.registry)
            except (ValidationFailed, EnvironmentConflict,
                    UnsupportedTaskForKind) as exc:
                with self.mutate(experiment_id) as rec:
                    if rec.status is not Status.COMPILING:
                        return
                    rec.errors.append({"phase": "compile", "message": str(exc)})
                    rec.transition(Status.FAILED)
                log.warning("experiment %s failed to compile: %s",
                            experiment_id, exc)
                return
            with self.mutate(experiment_id) as rec:
                if rec.status is not Status.COMPILING:
                    return
                rec.plan_doc = plan.to_doc()
                for node in exp.all_nodes():
                    rec.node_deploy(node.node_id)
                rec.transition(Status.DEPLOYING)

        record = self.record(experiment_id)
        if record.status is not Status.DEPLOYING:
            return
        plan = DeploymentPlan.from_doc(record.plan_doc or {})
        nodes = self._nodes_of(record)
        pending = [n for n in nodes
                   if record.deploy_state.get(n.node_id, {}).get("state",
                                              DEPLOY_PENDING) == DEPLOY_PENDING]

        def prepare_one(node: NodeDescriptor) -> None:
            outcome = {"state": DEPLOY_FAILED,
                       "reason": f"connector {node.connector_ref!r} missing"}
            connector = self.connectors.get(node.connector_ref)
            if connector is not None:
                try:
                    bundle = plan.bundle_for(node.node_id)
                    spec = plan.spec_for(bundle["pipeline_digest"], node.kind)
                    result = connector.prepare(node, spec)
                    outcome = ({"state": DEPLOY_PREPARED} if result.prepared
                               else {"state": DEPLOY_FAILED,
                                     "failed_command": result.failed_command,
                                     "reason": result.output})
                except Exception as exc:  # noqa: BLE001 - one bad node must
                    # not strand the whole deployment
                    outcome = {"state": DEPLOY_FAILED, "reason": str(exc)}
            with self.mutate(experiment_id) as rec:
                rec.deploy_state[node.node_id] = outcome

        if pending:
            workers = min(self.prepare_workers, len(pending))
            with ThreadPoolExecutor(max_workers=workers,
                                    thread_name_prefix="prepare") as pool:
                list(pool.map(prepare_one, pending))

        with self.mutate(experiment_id) as rec:
            if rec.status is not Status.DEPLOYING:
                return
            policies = Policies.from_doc(
                rec.experiment_doc.get("policies", {}))
            prepared = len(rec.prepared_nodes())
            total = len(nodes)
            if policies.deploy_strictness == "all-or-nothing":
                ok = prepared == total
            else:
                ok = prepared >= 1
            if ok:
                rec.transition(Status.READY)
            else:
                rec.errors.append({
                    "phase": "deploy",
                    "message": f"{prepared}/{total} nodes prepared under "
                               f"{policies.deploy_strictness}"})
                rec.transition(Status.FAILED)
        log.info("experiment %s deployment finished: %s", experiment_id,
                 self.record(experiment_id).status.value)

    def _executor_config(self, record: ExperimentRecord,
                         node_id: str) -> ExecutorConfig:
        # Executors fetch their bundle from the gateway (idempotent read with
        # a digest check) rather than receiving it inline.
        return ExecutorConfig(
            experiment_id=record.experiment_id,
            node_id=node_id,
            gateway_url=self.gateway_url,
            gateway_client=InProcessGatewayClient(self.gateway),
            registry=self.registry,
            flag_poll_interval=self.flag_poll_interval,
        )

    def _execute_worker(self, experiment_id: str) -> None:
        record = self.record(experiment_id)
        if record.status is not Status.RUNNING:
            return
        nodes = {n.node_id: n for n in self._nodes_of(record)}
        for node_id in record.prepared_nodes():
            if self._closed.is_set():
                return
            with self.mutate(experiment_id) as rec:
                if rec.status is not Status.RUNNING:
                    return
                state = rec.node_exec(node_id)
                if state.get("token"):
                    continue  # at-most-once: already launched some run
                state["token"] = uuid.uuid4().hex
                state["token_at"] = time.time()
                state["state"] = EXEC_RUNNING
            node = nodes[node_id]
            connector = self.connectors.get(node.connector_ref)
            failure: str | None = None
            if connector is None:
                failure = f"connector {node.connector_ref!r} missing"
            elif connector.health(node) != HEALTH_REACHABLE:
                failure = "node unreachable at launch"
            else:
                try:
                    handle = connector.launch_executor(
                        node, self._executor_config(record, node_id))
                    with self._handles_guard:
                        self._handles[(experiment_id, node_id)] = (connector,
                                                                   handle)
                except ExpforgeError as exc:
                    failure = str(exc)
            if failure is not None:
                with self.mutate(experiment_id) as rec:
                    rec.node_exec(node_id).update(
                        {"state": EXEC_UNREACHABLE, "reason": failure})
                log.warning("experiment %s node %s not launched: %s",
                            experiment_id, node_id, failure)
        self._ensure_monitor(experiment_id)

    def _ensure_monitor(self, experiment_id: str) -> None:
        with self._completion_guard:
            if experiment_id in self._monitored:
                return
            self._monitored.add(experiment_id)
        self._spawn(self._monitor, experiment_id,
                    name=f"monitor-{experiment_id}")

    def _monitor(self, experiment_id: str) -> None:
        """Completion monitor: one per RUNNING experiment."""
        cond = self._completion_cond(experiment_id)
        try:
            while not self._closed.is_set():
                record = self.record(experiment_id)
                if record.status is not Status.RUNNING:
                    return
                pending = record.pending_execution()
                if not pending:
                    self._finish(experiment_id)
                    return
                now = time.time()
                if record.deadline_wall is not None and now >= record.deadline_wall:
                    with self.mutate(experiment_id) as rec:
                        if rec.status is not Status.RUNNING:
                            return
                        for node_id in rec.pending_execution():
                            rec.node_exec(node_id)["state"] = EXEC_TIMED_OUT
                            log.warning("experiment %s node %s timed out",
                                        experiment_id, node_id)
                    self._finish(experiment_id)
                    return
                wait = self.monitor_poll_s
                if record.deadline_wall is not None:
                    wait = min(wait, max(record.deadline_wall - now, 0.01))
                with cond:
                    cond.wait(wait)
        finally:
            with self._completion_guard:
                self._monitored.discard(experiment_id)

    def _finish(self, experiment_id: str) -> None:
        with self.mutate(experiment_id) as rec:
            if rec.status is not Status.RUNNING:
                return
            if rec.reports:
                rec.transition(Status.FINISHED)
            else:
                rec.errors.append({"phase": "execute",
                                   "message": "no node delivered a report"})
                rec.transition(Status.FAILED)
        log.info("experiment %s finished: %s", experiment_id,
                 self.record(experiment_id).status.value)

    def _stop_handles(self, experiment_id: str) -> None:
        with self._handles_guard:
            entries = [(key, value) for key, value in self._handles.items()
                       if key[0] == experiment_id]
            for key, _ in entries:
                del self._handles[key]
        for (_, node_id), (connector, handle) in entries:
            try:
                connector.stop_executor(handle)
            except ExpforgeError:
                log.warning("could not stop executor on %s", node_id)

    # ------------------------------------------------------------------
    # recovery / shutdown
    # ------------------------------------------------------------------

    def recover(self) -> None:
        """Resume whatever the persisted records say was in flight."""
        for experiment_id in self.store.list_ids():
            try:
                record = self.record(experiment_id)
            except ExpforgeError:
                continue
            if record.status in (Status.COMPILING, Status.DEPLOYING):
                log.info("recovering deployment of %s", experiment_id)
                self._spawn(self._deploy_worker, experiment_id,
                            name=f"recover-deploy-{experiment_id}")
            elif record.status is Status.RUNNING:
                log.info("recovering execution of %s", experiment_id)
                self._spawn(self._execute_worker, experiment_id,
                            name=f"recover-execute-{experiment_id}")

    def close(self) -> None:
        """Stop background work; records stay as persisted."""
        self._closed.set()
        with self._completion_guard:
            conditions = list(self._completion.values())
        for cond in conditions:
            with cond:
                cond.notify_all()
