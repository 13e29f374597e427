"""Request loop: newline-delimited JSON, one response per request line.

Requests look like ``{"id": 3, "merged_path": "...", "tasks": ["task_0"],
"subsample": 64}`` (subsample optional) and responses echo the id with either
``per_task_accuracy`` or ``error``.  A line that cannot be parsed at all gets
an error response with id 0; a single bad request never terminates the loop.
End of input ends the process cleanly.

Subsampled requests draw examples from a counter-based stream keyed by the
request id, so a given (testbed, request) pair always scores the same subset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO

import numpy as np

from .model import Testbed, TestbedError, load_delta, per_task_accuracy
from .tensorfile import TensorFormatError


@dataclass
class BridgeConfig:
    testbed: Path
    tasks: list[str]
    log: Path | None = None


def _error(req_id: int, message: str) -> dict:
    return {"id": req_id, "error": message}


def handle_request(doc: object, bed: Testbed) -> dict:
    if not isinstance(doc, dict):
        return _error(0, "request must be a JSON object")
    req_id = doc.get("id")
    if isinstance(req_id, bool) or not isinstance(req_id, int) or req_id < 0:
        return _error(0, "request id must be a non-negative integer")

    merged_path = doc.get("merged_path")
    if not isinstance(merged_path, str) or not merged_path:
        return _error(req_id, "merged_path must be a non-empty string")
    tasks = doc.get("tasks")
    if not isinstance(tasks, list) or not tasks or not all(isinstance(t, str) for t in tasks):
        return _error(req_id, "tasks must be a non-empty list of names")
    unknown = [t for t in tasks if t not in bed.tasks]
    if unknown:
        return _error(req_id, f"unknown task: {', '.join(unknown)}")
    subsample = doc.get("subsample")
    if subsample is not None and (isinstance(subsample, bool) or not isinstance(subsample, int)):
        return _error(req_id, "subsample must be an integer")

    try:
        delta = load_delta(merged_path, bed)
        rng = None
        if subsample is not None:
            key = np.array([req_id, 0], dtype=np.uint64)
            rng = np.random.Generator(np.random.Philox(key=key))
        accuracies = per_task_accuracy(bed, delta, tasks, subsample=subsample, rng=rng)
    except (TestbedError, TensorFormatError, OSError) as exc:
        return _error(req_id, str(exc))
    except Exception as exc:  # one bad request must never kill the loop
        return _error(req_id, f"internal: {type(exc).__name__}: {exc}")
    return {"id": req_id, "per_task_accuracy": accuracies}


def serve(bed: Testbed, stdin: IO[str], stdout: IO[str], log: IO[str] | None = None) -> int:
    for raw in stdin:
        line = raw.strip()
        if not line:
            response = _error(0, "empty request line")
        else:
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                response = _error(0, f"request is not valid JSON: {exc}")
            else:
                response = handle_request(doc, bed)
        stdout.write(json.dumps(response, separators=(",", ":")) + "\n")
        stdout.flush()
        if log is not None:
            outcome = "error: " + response["error"] if "error" in response else "ok"
            log.write(f"id={response['id']} {outcome}\n")
            log.flush()
    return 0
