"""Executor-facing service: bundle fetch, report ingestion, coordination flags.

The gateway is a thin facade over the director's experiment records: report
ingestion and flag writes go through the director's per-experiment ownership
lock, so there is exactly one logical writer per record no matter how many
executors connect. Flags are monotone (set once, never unset within an
experiment), namespaced per experiment, and destroyed at cleanup; their
timestamps come from the gateway's clock so cross-node ordering has a single
authority.
"""

from __future__ import annotations

import hashlib
import threading
import time
import urllib.parse
from pathlib import Path
from typing import Any, Mapping, TYPE_CHECKING

import requests

from .errors import (
    TransportError,
    UnknownAssignment,
    UnknownExperiment,
    WrongPhase,
)
from .model import Status
from .store import EXEC_REPORTED, EXEC_TIMED_OUT

if TYPE_CHECKING:  # pragma: no cover
    from .director import Director


class Gateway:
    def __init__(self, director: "Director", artifact_root: str | Path | None = None):
        self._director = director
        self._flag_conds: dict[tuple[str, str], threading.Condition] = {}
        self._flag_lock = threading.Lock()
        self._artifact_root = Path(artifact_root) if artifact_root else None
        self._artifacts: dict[tuple[str, str, str], bytes] = {}
        self._artifact_meta: dict[str, list[dict]] = {}
        self._artifact_lock = threading.Lock()

    # -- bundles ---------------------------------------------------------------

    def fetch_bundle(self, experiment_id: str, node_id: str) -> dict:
        """The node's execution bundle; an idempotent read, repeatable at will."""
        record = self._director.record(experiment_id)
        if record.status is not Status.RUNNING:
            raise WrongPhase(
                f"bundle fetch requires RUNNING, {experiment_id} is "
                f"{record.status.value}")
        bundles = (record.plan_doc or {}).get("node_bundles", {})
        if node_id not in bundles:
            raise UnknownAssignment(
                f"node {node_id!r} has no assignment in {experiment_id!r}")
        return bundles[node_id]

    # -- reports ---------------------------------------------------------------

    def ingest_report(self, report_doc: Mapping[str, Any]) -> str:
        """Persist the first report per (experiment, node); 'duplicate' after.

        A report from a node already marked timed-out is still stored (late
        data beats no data) with a ``late`` annotation on the node state.
        """
        experiment_id = report_doc.get("experiment_id", "")
        node_id = report_doc.get("node_id", "")
        with self._director.mutate(experiment_id) as record:
            assigned = {n["node_id"]
                        for a in record.experiment_doc.get("assignments", ())
                        for n in a.get("nodes", ())}
            if node_id not in assigned:
                raise UnknownAssignment(
                    f"node {node_id!r} has no assignment in {experiment_id!r}")
            if node_id in record.reports:
                return "duplicate"
            state = record.node_exec(node_id)
            late = (state.get("state") == EXEC_TIMED_OUT
                    or record.status not in (Status.RUNNING,))
            record.reports[node_id] = {
                "received_wall": time.time(),
                "executor_version": report_doc.get("executor_version", ""),
                "late": late,
            }
            if state.get("state") != EXEC_TIMED_OUT:
                state["state"] = EXEC_REPORTED
            if late:
                state["late"] = True
            for result in report_doc.get("results", ()):
                record.results.append(dict(result))
        self._director.notify_completion(experiment_id)
        return "accepted"

    # -- flags -------------------------------------------------------------

    def _condition(self, experiment_id: str, key: str) -> threading.Condition:
        with self._flag_lock:
            return self._flag_conds.setdefault((experiment_id, key),
                                               threading.Condition())

    def set_flag(self, experiment_id: str, key: str, node_id: str) -> dict:
        """Set a monotone flag; idempotent, the first set's timestamp wins."""
        with self._director.mutate(experiment_id) as record:
            if record.status is not Status.RUNNING:
                raise WrongPhase(
                    f"flags require RUNNING, {experiment_id} is "
                    f"{record.status.value}")
            flag = record.flags.get(key)
            if flag is None:
                flag = {"set_wall": time.time(), "set_mono": time.monotonic(),
                        "node_id": node_id}
                record.flags[key] = flag
            flag = dict(flag)
        cond = self._condition(experiment_id, key)
        with cond:
            cond.notify_all()
        return flag

    def get_flag(self, experiment_id: str, key: str) -> dict:
        record = self._director.record(experiment_id)
        flag = record.flags.get(key)
        if flag is None:
            return {"set": False}
        return {"set": True, **flag}

    def wait_flag(self, experiment_id: str, key: str,
                  timeout_s: float) -> dict | None:
        """Block until the flag is set or the timeout elapses.

        The happens-before guarantee comes from reading through the store:
        a returned flag was durably written by the setter's set_flag.
        """
        deadline = time.monotonic() + timeout_s
        cond = self._condition(experiment_id, key)
        while True:
            state = self.get_flag(experiment_id, key)
            if state["set"]:
                return state
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            with cond:
                cond.wait(min(remaining, 0.5))

    def drop_flags(self, experiment_id: str) -> None:
        """Forget the experiment's flag conditions (record flags are cleared
        by the director's cleanup)."""
        with self._flag_lock:
            for key in [k for k in self._flag_conds if k[0] == experiment_id]:
                cond = self._flag_conds.pop(key)
                with cond:
                    cond.notify_all()

    # -- artifacts ---------------------------------------------------------

    def store_artifact(self, experiment_id: str, node_id: str, name: str,
                       data: bytes) -> dict:
        self._director.record(experiment_id)  # existence check
        digest = hashlib.sha256(data).hexdigest()
        meta = {"node_id": node_id, "name": name, "size": len(data),
                "digest": digest}
        with self._artifact_lock:
            if self._artifact_root is not None:
                safe = name.replace("/", "_")
                path = self._artifact_root / experiment_id / node_id / safe
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(data)
            else:
                self._artifacts[(experiment_id, node_id, name)] = data
            entries = self._artifact_meta.setdefault(experiment_id, [])
            entries[:] = [e for e in entries
                          if not (e["node_id"] == node_id and e["name"] == name)]
            entries.append(meta)
        return meta

    def list_artifacts(self, experiment_id: str) -> list[dict]:
        with self._artifact_lock:
            return [dict(e) for e in self._artifact_meta.get(experiment_id, [])]

    def artifact_data(self, experiment_id: str, node_id: str, name: str) -> bytes:
        with self._artifact_lock:
            if self._artifact_root is not None:
                safe = name.replace("/", "_")
                return (self._artifact_root / experiment_id / node_id
                        / safe).read_bytes()
            return self._artifacts[(experiment_id, node_id, name)]


# ---------------------------------------------------------------------------
# clients
# ---------------------------------------------------------------------------

class InProcessGatewayClient:
    """Direct client for executors running inside the platform process."""

    def __init__(self, gateway: Gateway):
        self._gateway = gateway

    def fetch_bundle(self, experiment_id: str, node_id: str) -> dict:
        return self._gateway.fetch_bundle(experiment_id, node_id)

    def deliver_report(self, report_doc: dict) -> str:
        return self._gateway.ingest_report(report_doc)

    def set_flag(self, experiment_id: str, key: str, node_id: str) -> dict:
        return self._gateway.set_flag(experiment_id, key, node_id)

    def get_flag(self, experiment_id: str, key: str) -> dict:
        return self._gateway.get_flag(experiment_id, key)

    def wait_flag(self, experiment_id: str, key: str, timeout_s: float,
                  poll_interval: float = 0.5,
                  cancel: threading.Event | None = None) -> dict | None:
        deadline = time.monotonic() + timeout_s
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            if cancel is not None and cancel.is_set():
                return None
            flag = self._gateway.wait_flag(experiment_id, key,
                                           min(remaining, 0.1))
            if flag is not None:
                return flag

    def upload_artifact(self, experiment_id: str, node_id: str, name: str,
                        data: bytes) -> dict:
        return self._gateway.store_artifact(experiment_id, node_id, name, data)


class HttpGatewayClient:
    """Wire client used by executors launched as separate processes."""

    def __init__(self, base_url: str, timeout_s: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self._session = requests.Session()

    def _request(self, method: str, path: str, **kwargs) -> Any:
        url = f"{self.base_url}{path}"
        kwargs.setdefault("timeout", self.timeout_s)
        try:
            response = self._session.request(method, url, **kwargs)
        except requests.RequestException as exc:
            raise TransportError(f"{method} {url}: {exc}") from exc
        if response.status_code >= 500:
            raise TransportError(
                f"{method} {url}: server error {response.status_code}")
        if response.status_code >= 400:
            try:
                payload = response.json()
            except ValueError:
                payload = {"message": response.text}
            message = payload.get("message", "request failed")
            error = payload.get("error", "")
            if response.status_code == 404:
                if error == "UnknownAssignment":
                    raise UnknownAssignment(message)
                raise UnknownExperiment(message)
            if response.status_code == 409:
                raise WrongPhase(message)
            raise TransportError(f"{method} {url}: {response.status_code} "
                                 f"{message}")
        if response.content:
            return response.json()
        return None

    def fetch_bundle(self, experiment_id: str, node_id: str) -> dict:
        query = urllib.parse.urlencode({"exp": experiment_id, "node": node_id})
        return self._request("GET", f"/gw/v1/bundle?{query}")

    def deliver_report(self, report_doc: dict) -> str:
        payload = self._request("POST", "/gw/v1/report", json=report_doc)
        return payload.get("result", "accepted")

    def set_flag(self, experiment_id: str, key: str, node_id: str) -> dict:
        return self._request(
            "POST", f"/gw/v1/flags/{experiment_id}/{key}",
            json={"node_id": node_id})

    def get_flag(self, experiment_id: str, key: str) -> dict:
        return self._request("GET", f"/gw/v1/flags/{experiment_id}/{key}")

    def wait_flag(self, experiment_id: str, key: str, timeout_s: float,
                  poll_interval: float = 0.5,
                  cancel: threading.Event | None = None) -> dict | None:
        """Client-side polling against the cheap flag read endpoint."""
        waiter = cancel or threading.Event()
        deadline = time.monotonic() + timeout_s
        while True:
            state = self.get_flag(experiment_id, key)
            if state.get("set"):
                return state
            remaining = deadline - time.monotonic()
            if remaining <= 0 or (cancel is not None and cancel.is_set()):
                return None
            waiter.wait(min(poll_interval, remaining))

    def upload_artifact(self, experiment_id: str, node_id: str, name: str,
                        data: bytes) -> dict:
        query = urllib.parse.urlencode({"name": name})
        return self._request(
            "POST", f"/gw/v1/artifacts/{experiment_id}/{node_id}?{query}",
            data=data,
            headers={"Content-Type": "application/octet-stream"})


GatewayClient = InProcessGatewayClient | HttpGatewayClient
