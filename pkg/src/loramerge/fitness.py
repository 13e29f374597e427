"""Fitness scoring and the two evaluator backends.

Fitness of a merged model is the mean over tasks of accuracy normalized by the
task expert's accuracy, so tasks with different ceilings contribute equally.
Evaluation runs either in process against a synthetic testbed or through an
external child process speaking newline-delimited JSON on stdin/stdout:

    request   {"id": 7, "merged_path": "...", "tasks": [...], "subsample": 64}
    response  {"id": 7, "per_task_accuracy": {"task_0": 0.93, ...}}
    failure   {"id": 7, "error": "description"}

Request ids are strictly increasing per child.  The child must answer each
request with exactly one line and exit cleanly on EOF.
"""

from __future__ import annotations

import json
import os
import queue
import select
import shutil
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import load_delta, save_delta
from .errors import (
    ConfigError,
    EvaluatorCrashError,
    EvaluatorProtocolError,
    EvaluatorRemoteError,
    EvaluatorTimeoutError,
)
from .merge import MergedDelta
from .testbed import SyntheticTestbed, evaluate


@dataclass(frozen=True)
class ExpertScores:
    """Per-task accuracy of each task's own expert adapter, in (0, 1]."""

    scores: dict[str, float]
    source: str = "supplied"  # or "measured"

    def __post_init__(self) -> None:
        if not self.scores:
            raise ConfigError("expert scores must not be empty")
        for task, value in self.scores.items():
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"expert score for {task!r} must be in (0, 1], got {value}")


def normalized_accuracy(accuracy: float, expert: float) -> float:
    """Accuracy relative to the task expert; may exceed 1."""
    if expert <= 0.0:
        raise ValueError(f"expert accuracy must be positive, got {expert}")
    if accuracy < 0.0:
        raise ValueError(f"accuracy must be non-negative, got {accuracy}")
    return accuracy / expert


def fitness(per_task_accuracy: dict[str, float], experts: ExpertScores) -> float:
    """Mean normalized accuracy over exactly the expert-covered tasks."""
    missing = sorted(set(experts.scores) - set(per_task_accuracy))
    extra = sorted(set(per_task_accuracy) - set(experts.scores))
    if missing:
        raise ConfigError(f"no accuracy reported for tasks: {', '.join(missing)}")
    if extra:
        raise ConfigError(f"no expert score for tasks: {', '.join(extra)}")
    values = [
        normalized_accuracy(per_task_accuracy[task], experts.scores[task])
        for task in sorted(per_task_accuracy)
    ]
    return float(np.mean(values))


class BuiltinEvaluator:
    """Evaluates merged deltas directly against an in-memory testbed."""

    def __init__(self, bed: SyntheticTestbed, subsample: int | None = None):
        self._bed = bed
        self.subsample = subsample
        self.tasks = [t.name for t in bed.tasks]

    @property
    def expert_scores(self) -> ExpertScores:
        return ExpertScores(dict(self._bed.expert_scores), source="measured")

    def evaluate(
        self, merged: MergedDelta, rng: np.random.Generator | None = None
    ) -> dict[str, float]:
        return evaluate(self._bed, merged.entries, subsample=self.subsample, rng=rng)

    def evaluate_file(
        self, path: str | Path, rng: np.random.Generator | None = None
    ) -> dict[str, float]:
        entries, _ = load_delta(path)
        return evaluate(self._bed, entries, subsample=self.subsample, rng=rng)

    def close(self) -> None:
        pass

    def __enter__(self) -> "BuiltinEvaluator":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


_READ_CHUNK = 65536
_STDERR_TAIL = 4096


class _Client:
    """One child process plus the line-framing state for talking to it."""

    def __init__(self, command: list[str], index: int, stderr_path: Path):
        self.index = index
        self._stderr_path = stderr_path
        self._stderr_file = open(stderr_path, "wb")
        try:
            self._proc = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=self._stderr_file,
            )
        except OSError as exc:
            self._stderr_file.close()
            raise EvaluatorCrashError(f"failed to start evaluator {command[0]!r}: {exc}") from exc
        self._buf = bytearray()
        self.next_id = 1

    def stderr_tail(self) -> str:
        try:
            self._stderr_file.flush()
            data = self._stderr_path.read_bytes()
        except OSError:
            return ""
        return data[-_STDERR_TAIL:].decode("utf-8", errors="replace").strip()

    def _crash(self, context: str) -> EvaluatorCrashError:
        code = self._proc.poll()
        detail = f" (exit code {code})" if code is not None else ""
        return EvaluatorCrashError(f"evaluator {context}{detail}", stderr=self.stderr_tail())

    def request(self, payload: dict, timeout: float) -> dict:
        req_id = payload["id"]
        line = (json.dumps(payload, sort_keys=True) + "\n").encode("utf-8")
        try:
            self._proc.stdin.write(line)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            self._proc.wait()
            raise self._crash("closed its stdin before accepting a request") from None
        raw = self._read_line(timeout)
        if raw is None:
            self._proc.wait()
            raise self._crash("exited before replying")
        try:
            resp = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            snippet = raw[:200].decode("utf-8", errors="replace")
            raise EvaluatorProtocolError(f"unparseable response line: {snippet!r}") from exc
        if not isinstance(resp, dict):
            raise EvaluatorProtocolError(f"response must be a JSON object, got {type(resp).__name__}")
        return resp

    def _read_line(self, timeout: float) -> bytes | None:
        fd = self._proc.stdout.fileno()
        deadline = time.monotonic() + timeout
        while True:
            newline = self._buf.find(b"\n")
            if newline >= 0:
                line = bytes(self._buf[:newline])
                del self._buf[: newline + 1]
                return line
            remaining = deadline - time.monotonic()
            if remaining <= 0.0:
                self.destroy()
                raise EvaluatorTimeoutError(f"evaluator did not reply within {timeout:g}s")
            ready, _, _ = select.select([fd], [], [], min(remaining, 0.5))
            if not ready:
                continue
            chunk = os.read(fd, _READ_CHUNK)
            if not chunk:
                return None
            self._buf += chunk

    def alive(self) -> bool:
        return self._proc.poll() is None

    def destroy(self) -> None:
        for stream in (self._proc.stdin, self._proc.stdout):
            try:
                if stream is not None:
                    stream.close()
            except OSError:
                pass
        if self._proc.poll() is None:
            self._proc.kill()
        self._proc.wait()
        self._stderr_file.close()


class ExternalEvaluator:
    """Thread-safe client pool for an external evaluator command.

    Spawns up to ``workers`` children lazily; concurrent ``evaluate`` calls
    each borrow an idle child.  Candidate deltas are written to unique files
    under ``workdir`` and deleted once the child has replied.
    """

    def __init__(
        self,
        command: list[str],
        tasks: list[str],
        *,
        timeout: float = 600.0,
        subsample: int | None = None,
        workers: int = 1,
        workdir: str | Path | None = None,
    ):
        if not command:
            raise ConfigError("evaluator command must not be empty")
        if workers < 1:
            raise ConfigError("evaluator workers must be at least 1")
        self.command = list(command)
        self.tasks = list(tasks)
        self.timeout = timeout
        self.subsample = subsample
        self._workers = workers
        self._owns_dir = workdir is None
        self._dir = Path(tempfile.mkdtemp(prefix="loramerge-eval-")) if workdir is None else Path(workdir)
        self._dir.mkdir(parents=True, exist_ok=True)
        self._idle: queue.Queue[_Client] = queue.Queue()
        self._lock = threading.Lock()
        self._spawned = 0
        self._counter = 0
        self._closed = False

    def _acquire(self) -> _Client:
        while True:
            try:
                return self._idle.get_nowait()
            except queue.Empty:
                pass
            with self._lock:
                if self._closed:
                    raise RuntimeError("evaluator is closed")
                can_spawn = self._spawned < self._workers
                if can_spawn:
                    self._spawned += 1
                    self._counter += 1
                    index = self._counter
            if can_spawn:
                try:
                    return _Client(self.command, index, self._dir / f"evaluator-{index}.stderr.log")
                except Exception:
                    with self._lock:
                        self._spawned -= 1
                    raise
            try:
                return self._idle.get(timeout=0.1)
            except queue.Empty:
                continue

    def _release(self, client: _Client, healthy: bool) -> None:
        if healthy and client.alive():
            self._idle.put(client)
        else:
            client.destroy()
            with self._lock:
                self._spawned -= 1

    def _request(self, client: _Client, merged_path: str) -> dict[str, float]:
        req_id = client.next_id
        client.next_id += 1
        payload: dict[str, object] = {
            "id": req_id,
            "merged_path": merged_path,
            "tasks": self.tasks,
        }
        if self.subsample is not None:
            payload["subsample"] = int(self.subsample)
        resp = client.request(payload, self.timeout)
        error = resp.get("error")
        if error is not None:
            raise EvaluatorRemoteError(f"evaluator reported an error: {error}")
        if resp.get("id") != req_id:
            raise EvaluatorProtocolError(
                f"response id {resp.get('id')!r} does not match request id {req_id}"
            )
        accs = resp.get("per_task_accuracy")
        if not isinstance(accs, dict):
            raise EvaluatorProtocolError("response is missing per_task_accuracy")
        missing = [task for task in self.tasks if task not in accs]
        if missing:
            raise EvaluatorProtocolError(f"response missing tasks: {', '.join(missing)}")
        out: dict[str, float] = {}
        for task in self.tasks:
            value = accs[task]
            if not isinstance(value, (int, float)) or not 0.0 <= float(value) <= 1.0:
                raise EvaluatorProtocolError(f"accuracy for {task!r} is not in [0, 1]: {value!r}")
            out[task] = float(value)
        return out

    def evaluate(
        self, merged: MergedDelta, rng: np.random.Generator | None = None
    ) -> dict[str, float]:
        client = self._acquire()
        path = self._dir / f"cand-{client.index}-{client.next_id}.safetensors"
        healthy = False
        try:
            save_delta(path, merged.entries, merged.manifest())
            result = self._request(client, str(path))
            healthy = True
            return result
        finally:
            path.unlink(missing_ok=True)
            self._release(client, healthy)

    def evaluate_file(
        self, path: str | Path, rng: np.random.Generator | None = None
    ) -> dict[str, float]:
        client = self._acquire()
        healthy = False
        try:
            result = self._request(client, str(path))
            healthy = True
            return result
        finally:
            self._release(client, healthy)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        while True:
            try:
                self._idle.get_nowait().destroy()
            except queue.Empty:
                break
        if self._owns_dir:
            shutil.rmtree(self._dir, ignore_errors=True)
        else:
            for log in self._dir.glob("evaluator-*.stderr.log"):
                try:
                    log.unlink()
                except OSError:
                    pass

    def __enter__(self) -> "ExternalEvaluator":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
