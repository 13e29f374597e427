"""Run configuration: one JSON file describing adapters, merge parameters,
search settings, and the evaluator.

Unknown keys are rejected at every level so typos fail fast.  Relative paths
resolve against the directory containing the config file, which keeps configs
checked into a repository working from any working directory.  A JSON Schema
for editors lives in docs/config-schema.json.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .adapters import NAMING_SCHEMES
from .errors import ConfigError
from .merge import MergeParams, preset_params
from .search import SearchConfig

TOP_LEVEL_KEYS = {"adapters", "merge", "search", "evaluator", "output_dir", "figures"}
ADAPTER_KEYS = {"task", "path", "expert_accuracy", "naming"}
MERGE_KEYS = {"preset", "method", "lambda", "density", "drop_rate", "inner", "order", "rank", "seed"}
SEARCH_KEYS = {"pop_size", "generations", "sigma0", "max_prune", "seed", "parallelism", "subsample"}
EVALUATOR_BUILTIN_KEYS = {"type", "testbed"}
EVALUATOR_EXTERNAL_KEYS = {"type", "command", "timeout"}

_PRESET_NAMES = ("nlp", "vision")


@dataclass(frozen=True)
class AdapterEntry:
    task: str
    path: Path
    expert_accuracy: float | None = None
    naming: str = "canonical"


@dataclass(frozen=True)
class EvaluatorSpec:
    type: str  # "builtin" or "external"
    testbed: Path | None = None
    command: list[str] = field(default_factory=list)
    timeout: float = 600.0


@dataclass(frozen=True)
class RunConfig:
    adapters: list[AdapterEntry]
    merge: MergeParams
    search: SearchConfig
    evaluator: EvaluatorSpec
    output_dir: Path
    figures: bool = True


def _require_mapping(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be an object, got {type(value).__name__}")
    return value


def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys: {', '.join(unknown)}")


def _string(doc: dict, key: str, where: str) -> str:
    if key not in doc:
        raise ConfigError(f"{where}: missing required key {key!r}")
    value = doc[key]
    if not isinstance(value, str) or not value:
        raise ConfigError(f"{where}.{key} must be a non-empty string")
    return value


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {type(value).__name__}")
    return float(value)


def _integer(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {type(value).__name__}")
    return value


def _parse_adapter(doc, index: int, base: Path) -> AdapterEntry:
    where = f"adapters[{index}]"
    doc = _require_mapping(doc, where)
    _reject_unknown(doc, ADAPTER_KEYS, where)
    task = _string(doc, "task", where)
    path = base / _string(doc, "path", where)
    expert = None
    if "expert_accuracy" in doc:
        expert = _number(doc["expert_accuracy"], f"{where}.expert_accuracy")
        if not 0.0 < expert <= 1.0:
            raise ConfigError(f"{where}.expert_accuracy must be in (0, 1], got {expert}")
    naming = doc.get("naming", "canonical")
    if naming not in NAMING_SCHEMES:
        raise ConfigError(
            f"{where}.naming must be one of {sorted(NAMING_SCHEMES)}, got {naming!r}"
        )
    return AdapterEntry(task=task, path=path, expert_accuracy=expert, naming=naming)


def _parse_merge(doc) -> MergeParams:
    if doc is None:
        return MergeParams(method="ta")
    doc = _require_mapping(doc, "merge")
    _reject_unknown(doc, MERGE_KEYS, "merge")
    method = _string(doc, "method", "merge")
    overrides: dict[str, object] = {}
    if "lambda" in doc:
        overrides["lam"] = _number(doc["lambda"], "merge.lambda")
    for key in ("density", "drop_rate"):
        if key in doc:
            overrides[key] = _number(doc[key], f"merge.{key}")
    for key in ("inner", "order"):
        if key in doc:
            value = doc[key]
            if not isinstance(value, str):
                raise ConfigError(f"merge.{key} must be a string")
            overrides[key] = value
    if "rank" in doc and doc["rank"] is not None:
        overrides["rank"] = _integer(doc["rank"], "merge.rank")
    if "seed" in doc:
        overrides["seed"] = _integer(doc["seed"], "merge.seed")
    preset = doc.get("preset")
    try:
        if preset is not None:
            if preset not in _PRESET_NAMES:
                raise ConfigError(f"merge.preset must be one of {_PRESET_NAMES}, got {preset!r}")
            return preset_params(method, preset, **overrides)
        return MergeParams(method=method, **overrides)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"merge: {exc}") from exc


def _parse_search(doc) -> SearchConfig:
    if doc is None:
        return SearchConfig()
    doc = _require_mapping(doc, "search")
    _reject_unknown(doc, SEARCH_KEYS, "search")
    kwargs: dict[str, object] = {}
    for key in ("pop_size", "generations", "seed", "parallelism"):
        if key in doc:
            kwargs[key] = _integer(doc[key], f"search.{key}")
    for key in ("sigma0", "max_prune"):
        if key in doc:
            kwargs[key] = _number(doc[key], f"search.{key}")
    if "subsample" in doc and doc["subsample"] is not None:
        kwargs["subsample"] = _integer(doc["subsample"], "search.subsample")
    try:
        return SearchConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"search: {exc}") from exc


def _parse_evaluator(doc, base: Path) -> EvaluatorSpec:
    doc = _require_mapping(doc, "evaluator")
    etype = _string(doc, "type", "evaluator")
    if etype == "builtin":
        _reject_unknown(doc, EVALUATOR_BUILTIN_KEYS, "evaluator")
        testbed = base / _string(doc, "testbed", "evaluator")
        return EvaluatorSpec(type="builtin", testbed=testbed)
    if etype == "external":
        _reject_unknown(doc, EVALUATOR_EXTERNAL_KEYS, "evaluator")
        if "command" not in doc:
            raise ConfigError("evaluator: missing required key 'command'")
        command = doc["command"]
        if not isinstance(command, list) or not command:
            raise ConfigError("evaluator.command must be a non-empty array of strings")
        for i, item in enumerate(command):
            if not isinstance(item, str):
                raise ConfigError(f"evaluator.command[{i}] must be a string")
        timeout = 600.0
        if "timeout" in doc:
            timeout = _number(doc["timeout"], "evaluator.timeout")
            if timeout <= 0:
                raise ConfigError(f"evaluator.timeout must be positive, got {timeout}")
        return EvaluatorSpec(type="external", command=list(command), timeout=timeout)
    raise ConfigError(f"evaluator.type must be 'builtin' or 'external', got {etype!r}")


def parse_config(doc: dict, base_dir: Path) -> RunConfig:
    """Validates a parsed JSON document; relative paths resolve to base_dir."""
    doc = _require_mapping(doc, "config")
    _reject_unknown(doc, TOP_LEVEL_KEYS, "config")
    for key in ("adapters", "evaluator", "output_dir"):
        if key not in doc:
            raise ConfigError(f"config: missing required key {key!r}")
    if not isinstance(doc["adapters"], list):
        raise ConfigError("adapters must be an array")
    adapters = [_parse_adapter(entry, i, base_dir) for i, entry in enumerate(doc["adapters"])]
    if len(adapters) < 2:
        raise ConfigError("at least two adapters are required to merge")
    tasks = [a.task for a in adapters]
    if len(set(tasks)) != len(tasks):
        dupes = sorted({t for t in tasks if tasks.count(t) > 1})
        raise ConfigError(f"duplicate adapter tasks: {', '.join(dupes)}")
    figures = doc.get("figures", True)
    if not isinstance(figures, bool):
        raise ConfigError("figures must be a boolean")
    return RunConfig(
        adapters=adapters,
        merge=_parse_merge(doc.get("merge")),
        search=_parse_search(doc.get("search")),
        evaluator=_parse_evaluator(doc["evaluator"], base_dir),
        output_dir=base_dir / _string(doc, "output_dir", "config"),
        figures=figures,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, path.parent)
