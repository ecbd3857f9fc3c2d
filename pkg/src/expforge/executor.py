"""Node-resident executor: runs one pipeline, reports once at the end.

Stages run sequentially with a hard barrier between them; tasks inside a
stage run concurrently, each on its own thread with its own cancellation
event and timeout. Every task anomaly becomes a TaskResult; nothing
propagates to the caller. The finished report is flushed to a local spool
file before the first delivery attempt and removed only after the gateway
acknowledged it, so a crash or an unreachable gateway never loses results.

As a child process (``python -m expforge.executor``) configuration comes from
environment variables: EXPFORGE_GATEWAY, EXPFORGE_EXPERIMENT_ID,
EXPFORGE_NODE_ID, EXPFORGE_BUNDLE (path or inline JSON; fetched from the
gateway when unset), EXPFORGE_SCRATCH, EXPFORGE_SPOOL.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, TYPE_CHECKING

from .errors import TransportError
from .model import (
    NodeDescriptor,
    Outcome,
    Pipeline,
    Stage,
    TaskResult,
    TaskSpec,
    digest_doc,
)
from .registry import TaskError, TaskRegistry

if TYPE_CHECKING:  # pragma: no cover
    from .gateway import GatewayClient

log = logging.getLogger("expforge.executor")

EXECUTOR_VERSION = "0.1.0"

# Exit codes: connectors distinguish launch problems from task failures.
EXIT_OK = 0                 # report delivered or spooled (task failures included)
EXIT_STARTUP_ERROR = 2      # bundle unavailable or digest mismatch
EXIT_STOPPED = 3            # stopped before the pipeline finished

CANCEL_GRACE_S = 1.0


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff for report delivery."""

    base_delay_s: float = 1.0
    factor: float = 2.0
    max_attempts: int = 5

    def to_doc(self) -> dict:
        return {"base_delay_s": self.base_delay_s, "factor": self.factor,
                "max_attempts": self.max_attempts}

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "RetryPolicy":
        return cls(base_delay_s=float(doc.get("base_delay_s", 1.0)),
                   factor=float(doc.get("factor", 2.0)),
                   max_attempts=int(doc.get("max_attempts", 5)))


@dataclass(frozen=True)
class PipelineBundle:
    """Everything a node needs to run its pipeline, shipped by the compiler."""

    experiment_id: str
    node_id: str
    node_kind: str
    pipeline: Pipeline
    pipeline_digest: str
    impl_ids: Mapping[str, str]
    early_stop: bool = False
    report_retry: RetryPolicy = RetryPolicy()

    def digest_matches(self) -> bool:
        """Tamper/skew check: the shipped digest must match the pipeline."""
        return digest_doc(self.pipeline.to_doc()) == self.pipeline_digest

    def to_doc(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "node_id": self.node_id,
            "node_kind": self.node_kind,
            "pipeline": self.pipeline.to_doc(),
            "pipeline_digest": self.pipeline_digest,
            "impl_ids": dict(self.impl_ids),
            "early_stop": self.early_stop,
            "report_retry": self.report_retry.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "PipelineBundle":
        return cls(
            experiment_id=doc["experiment_id"],
            node_id=doc["node_id"],
            node_kind=doc.get("node_kind", "linux-shell"),
            pipeline=Pipeline.from_doc(doc["pipeline"]),
            pipeline_digest=doc["pipeline_digest"],
            impl_ids=dict(doc.get("impl_ids", {})),
            early_stop=bool(doc.get("early_stop", False)),
            report_retry=RetryPolicy.from_doc(doc.get("report_retry", {})),
        )


@dataclass(frozen=True)
class PipelineReport:
    """Single end-of-pipeline report for one (experiment, node)."""

    experiment_id: str
    node_id: str
    results: tuple[TaskResult, ...]
    executor_version: str = EXECUTOR_VERSION
    started_wall: float = 0.0
    finished_wall: float = 0.0
    started_mono: float = 0.0
    finished_mono: float = 0.0

    def to_doc(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "node_id": self.node_id,
            "results": [r.to_doc() for r in self.results],
            "executor_version": self.executor_version,
            "started_wall": self.started_wall,
            "finished_wall": self.finished_wall,
            "started_mono": self.started_mono,
            "finished_mono": self.finished_mono,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "PipelineReport":
        return cls(
            experiment_id=doc["experiment_id"],
            node_id=doc["node_id"],
            results=tuple(TaskResult.from_doc(r) for r in doc.get("results", ())),
            executor_version=doc.get("executor_version", ""),
            started_wall=doc.get("started_wall", 0.0),
            finished_wall=doc.get("finished_wall", 0.0),
            started_mono=doc.get("started_mono", 0.0),
            finished_mono=doc.get("finished_mono", 0.0),
        )


# ---------------------------------------------------------------------------
# node runtimes
# ---------------------------------------------------------------------------

class NodeRuntime:
    """Target-specific surface task implementations run against.

    Keeps implementations portable across real shells and the simulated
    infrastructure: commands, scratch files, sleeping, and event logging all
    go through here.
    """

    kind: str = ""

    def run_command(self, command: str, cancel: threading.Event,
                    timeout: float | None = None) -> tuple[int, str]:
        raise NotImplementedError

    def sleep(self, seconds: float, cancel: threading.Event) -> bool:
        """Sleep; False when interrupted by cancellation."""
        raise NotImplementedError

    def write_file(self, path: str, content: str | bytes) -> None:
        raise NotImplementedError

    def read_file(self, path: str) -> bytes:
        raise NotImplementedError

    def file_exists(self, path: str) -> bool:
        raise NotImplementedError

    def file_size(self, path: str) -> int:
        raise NotImplementedError

    def list_files(self) -> list[str]:
        raise NotImplementedError

    def log_event(self, scope: str, name: str, detail: dict | None = None) -> None:
        """Record an execution event (no-op outside the simulator)."""

    def scoped(self, scope: str) -> "NodeRuntime":
        """A view of this runtime attributing implicit events to ``scope``."""
        return self


class LocalRuntime(NodeRuntime):
    """Runs commands in a real shell with a scratch directory as cwd."""

    kind = "linux-shell"

    def __init__(self, scratch: str | Path):
        self.scratch = Path(scratch)
        self.scratch.mkdir(parents=True, exist_ok=True)

    def resolve(self, path: str) -> Path:
        candidate = Path(path)
        return candidate if candidate.is_absolute() else self.scratch / candidate

    def run_command(self, command: str, cancel: threading.Event,
                    timeout: float | None = None) -> tuple[int, str]:
        proc = subprocess.Popen(
            command, shell=True, cwd=str(self.scratch),
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                output = proc.communicate(timeout=0.05)[0]
                return proc.returncode, output or ""
            except subprocess.TimeoutExpired:
                expired = deadline is not None and time.monotonic() > deadline
                if cancel.is_set() or expired:
                    proc.kill()
                    output = proc.communicate()[0]
                    return -9, output or ""

    def sleep(self, seconds: float, cancel: threading.Event) -> bool:
        return not cancel.wait(seconds)

    def write_file(self, path: str, content: str | bytes) -> None:
        target = self.resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            target.write_text(content, encoding="utf-8")

    def read_file(self, path: str) -> bytes:
        return self.resolve(path).read_bytes()

    def file_exists(self, path: str) -> bool:
        return self.resolve(path).exists()

    def file_size(self, path: str) -> int:
        return self.resolve(path).stat().st_size

    def list_files(self) -> list[str]:
        return sorted(str(p.relative_to(self.scratch))
                      for p in self.scratch.rglob("*") if p.is_file())

    def wipe_scratch(self) -> None:
        for entry in self.scratch.iterdir():
            if entry.is_dir():
                shutil.rmtree(entry, ignore_errors=True)
            else:
                entry.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# task context and execution
# ---------------------------------------------------------------------------

@dataclass
class TaskContext:
    """Explicit, per-task view of the executor's world.

    ``shared``/``shared_lock`` are scoped to one executor run and are the only
    sanctioned cross-task state (capture handles live there).
    """

    experiment_id: str
    node: NodeDescriptor
    runtime: NodeRuntime
    gateway: "GatewayClient | None" = None
    shared: dict = field(default_factory=dict)
    shared_lock: threading.Lock = field(default_factory=threading.Lock)
    cancel: threading.Event = field(default_factory=threading.Event)
    stage_index: int = 0
    task_name: str = ""
    flag_poll_interval: float = 0.5


def _task_scope(stage_index: int, task_name: str) -> str:
    return f"task:{stage_index}:{task_name}"


def run_task(task: TaskSpec, registry: TaskRegistry, impl_id: str | None,
             ctx: TaskContext) -> TaskResult:
    """Run one task with its timeout; anomalies become result outcomes.

    Timestamps come from the monotonic clock (plus wall time for humans).
    On timeout the task's cancel event fires: builtin tasks cancel
    cooperatively, shell tasks get their process killed.
    """
    scope = _task_scope(ctx.stage_index, task.name)
    ctx.runtime = ctx.runtime.scoped(scope)
    ctx.runtime.log_event(scope, "task-start",
                          {"task_type": task.task_type})
    started_wall, started_mono = time.time(), time.monotonic()

    holder: dict[str, Any] = {}
    done = threading.Event()

    def work() -> None:
        try:
            if impl_id is None:
                raise TaskError(
                    f"no implementation resolved for task {task.name!r}")
            impl = registry.implementation(impl_id)
            holder["payload"] = impl.run(task.params, ctx)
        except TaskError as exc:
            holder["error"] = str(exc)
            holder["payload"] = exc.payload
        except BaseException as exc:  # noqa: BLE001 - every anomaly is a result
            holder["error"] = f"{type(exc).__name__}: {exc}"
        finally:
            done.set()

    worker = threading.Thread(target=work, daemon=True,
                              name=f"task-{ctx.node.node_id}-{task.name}")
    worker.start()
    completed = done.wait(task.timeout_s)
    if not completed:
        ctx.cancel.set()
        done.wait(CANCEL_GRACE_S)

    finished_wall, finished_mono = time.time(), time.monotonic()
    if not completed:
        outcome = Outcome.TIMEOUT
        error_text = f"timed out after {task.timeout_s}s"
        payload = None
    elif "error" in holder:
        outcome = Outcome.FAILURE
        error_text = holder["error"]
        payload = holder.get("payload")
    else:
        outcome = Outcome.SUCCESS
        error_text = None
        payload = holder.get("payload")

    ctx.runtime.log_event(scope, "task-finish", {"outcome": outcome.value})
    return TaskResult(
        task_name=task.name,
        node_id=ctx.node.node_id,
        stage_index=ctx.stage_index,
        outcome=outcome,
        started_wall=started_wall,
        finished_wall=finished_wall,
        started_mono=started_mono,
        finished_mono=finished_mono,
        payload=payload,
        error_text=error_text,
    )


def run_stage(stage: Stage, stage_index: int, bundle: PipelineBundle,
              registry: TaskRegistry, base_ctx: TaskContext) -> list[TaskResult]:
    """Run all tasks of a stage concurrently; ends when the last task ends.

    Every task is submitted before any is awaited, so an n-task stage of
    equal-duration work completes in roughly one task's duration.
    """
    contexts = [
        replace(base_ctx, cancel=threading.Event(),
                stage_index=stage_index, task_name=task.name)
        for task in stage.tasks
    ]
    with ThreadPoolExecutor(max_workers=len(stage.tasks),
                            thread_name_prefix="stage") as pool:
        futures = [
            pool.submit(run_task, task, registry,
                        bundle.impl_ids.get(task.name), ctx)
            for task, ctx in zip(stage.tasks, contexts)
        ]
        return [f.result() for f in futures]


def _skipped(task: TaskSpec, stage_index: int, node_id: str) -> TaskResult:
    return TaskResult(task_name=task.name, node_id=node_id,
                      stage_index=stage_index, outcome=Outcome.SKIPPED)


def run_pipeline(bundle: PipelineBundle, registry: TaskRegistry,
                 runtime: NodeRuntime,
                 gateway: "GatewayClient | None" = None,
                 stop: threading.Event | None = None,
                 flag_poll_interval: float = 0.5) -> list[TaskResult]:
    """Execute the bundle's stages in order and return one result per task.

    A failed or timed-out task aborts the remaining stages when the pipeline
    asked for early_stop; the unrun tasks still appear, marked skipped, so
    the report always covers the full task count.
    """
    base_ctx = TaskContext(
        experiment_id=bundle.experiment_id,
        node=NodeDescriptor(node_id=bundle.node_id, kind=bundle.node_kind),
        runtime=runtime,
        gateway=gateway,
        flag_poll_interval=flag_poll_interval,
    )
    results: list[TaskResult] = []
    abort = False
    for stage_index, stage in enumerate(bundle.pipeline.stages):
        stopped = stop is not None and stop.is_set()
        if abort or stopped:
            results.extend(_skipped(t, stage_index, bundle.node_id)
                           for t in stage.tasks)
            continue
        stage_results = run_stage(stage, stage_index, bundle, registry, base_ctx)
        results.extend(stage_results)
        if bundle.early_stop and any(
                r.outcome in (Outcome.FAILURE, Outcome.TIMEOUT)
                for r in stage_results):
            abort = True
    return results


# ---------------------------------------------------------------------------
# report delivery and spooling
# ---------------------------------------------------------------------------

def spool_path(spool_dir: str | Path, experiment_id: str, node_id: str) -> Path:
    safe = "".join(c if c.isalnum() or c in "-_." else "_"
                   for c in f"{experiment_id}-{node_id}")
    return Path(spool_dir) / f"{safe}.report.json"


def write_spool(spool_dir: str | Path, report_doc: dict) -> Path:
    """Durably persist an undelivered report; one document per report."""
    directory = Path(spool_dir)
    directory.mkdir(parents=True, exist_ok=True)
    path = spool_path(directory, report_doc["experiment_id"],
                      report_doc["node_id"])
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8") as handle:
        json.dump(report_doc, handle)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)
    return path


def deliver_report(report_doc: dict, gateway: "GatewayClient",
                   retry: RetryPolicy,
                   sleeper=time.sleep) -> str:
    """Deliver with exponential backoff; 'delivered' or 'undelivered'."""
    delay = retry.base_delay_s
    for attempt in range(1, retry.max_attempts + 1):
        try:
            gateway.deliver_report(report_doc)
            return "delivered"
        except TransportError as exc:
            log.warning("report delivery attempt %d/%d failed: %s",
                        attempt, retry.max_attempts, exc)
            if attempt == retry.max_attempts:
                break
            sleeper(delay)
            delay *= retry.factor
    return "undelivered"


def redeliver_spooled(spool_dir: str | Path, gateway: "GatewayClient") -> int:
    """Try undelivered reports from previous runs once each; keep failures."""
    directory = Path(spool_dir)
    if not directory.is_dir():
        return 0
    delivered = 0
    for path in sorted(directory.glob("*.report.json")):
        try:
            report_doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            log.warning("dropping corrupt spool file %s", path)
            path.unlink(missing_ok=True)
            continue
        try:
            gateway.deliver_report(report_doc)
        except TransportError:
            continue
        path.unlink(missing_ok=True)
        delivered += 1
    return delivered


def run_executor(bundle: PipelineBundle, registry: TaskRegistry,
                 runtime: NodeRuntime, gateway: "GatewayClient",
                 spool_dir: str | Path,
                 stop: threading.Event | None = None,
                 flag_poll_interval: float = 0.5,
                 sleeper=time.sleep) -> int:
    """Full executor run: spool replay, digest check, pipeline, report."""
    redeliver_spooled(spool_dir, gateway)

    if not bundle.digest_matches():
        log.error("bundle digest mismatch for %s/%s",
                  bundle.experiment_id, bundle.node_id)
        return EXIT_STARTUP_ERROR

    started_wall, started_mono = time.time(), time.monotonic()
    results = run_pipeline(bundle, registry, runtime, gateway, stop,
                           flag_poll_interval)
    finished_wall, finished_mono = time.time(), time.monotonic()

    if stop is not None and stop.is_set():
        return EXIT_STOPPED

    report = PipelineReport(
        experiment_id=bundle.experiment_id,
        node_id=bundle.node_id,
        results=tuple(results),
        started_wall=started_wall,
        finished_wall=finished_wall,
        started_mono=started_mono,
        finished_mono=finished_mono,
    )
    report_doc = report.to_doc()
    path = write_spool(spool_dir, report_doc)
    if deliver_report(report_doc, gateway, bundle.report_retry,
                      sleeper=sleeper) == "delivered":
        path.unlink(missing_ok=True)
    return EXIT_OK


# ---------------------------------------------------------------------------
# child-process entry point
# ---------------------------------------------------------------------------

def _load_bundle_from_env(gateway) -> PipelineBundle:
    raw = os.environ.get("EXPFORGE_BUNDLE")
    if raw:
        text = Path(raw).read_text(encoding="utf-8") \
            if not raw.lstrip().startswith("{") else raw
        return PipelineBundle.from_doc(json.loads(text))
    experiment_id = os.environ["EXPFORGE_EXPERIMENT_ID"]
    node_id = os.environ["EXPFORGE_NODE_ID"]
    return PipelineBundle.from_doc(gateway.fetch_bundle(experiment_id, node_id))


def main(argv: list[str] | None = None) -> int:
    from .gateway import HttpGatewayClient
    from .tasks import builtin_registry

    logging.basicConfig(level=os.environ.get("EXPFORGE_LOG_LEVEL", "WARNING"))
    gateway_url = os.environ.get("EXPFORGE_GATEWAY")
    if not gateway_url:
        log.error("EXPFORGE_GATEWAY is not set")
        return EXIT_STARTUP_ERROR
    gateway = HttpGatewayClient(gateway_url)
    scratch = os.environ.get("EXPFORGE_SCRATCH", "./expforge-scratch")
    spool = os.environ.get("EXPFORGE_SPOOL", str(Path(scratch) / ".spool"))
    try:
        bundle = _load_bundle_from_env(gateway)
    except Exception as exc:  # noqa: BLE001 - startup failure is the contract
        log.error("could not obtain bundle: %s", exc)
        return EXIT_STARTUP_ERROR
    runtime = LocalRuntime(scratch)
    poll = float(os.environ.get("EXPFORGE_POLL_INTERVAL", "0.5"))
    return run_executor(bundle, builtin_registry(), runtime, gateway, spool,
                        flag_poll_interval=poll)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
