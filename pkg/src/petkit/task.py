"""Task configuration files (TOML): label set, patterns, verbalizer tables."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .pvp import LabelSet, Pattern, Pvp, Verbalizer, build_pvps, parse_pattern_dsl


@dataclass(frozen=True)
class TaskSpec:
    name: str
    label_set: LabelSet
    arity: int
    patterns: tuple[Pattern, ...]
    verbalizers: tuple[Verbalizer, ...]

    def pvps(self) -> tuple[Pvp, ...]:
        return build_pvps(self.label_set, list(self.patterns), list(self.verbalizers))


def load_task_config(path: str | Path) -> TaskSpec:
    """Parse a task file.  Layout::

        [task]
        name = "yelp"
        labels = ["1", "2", "3", "4", "5"]
        arity = 1
        patterns = ["It was {mask}. {0}", ...]

        [[task.verbalizers]]
        "1" = "terrible"
        ...
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    task = raw.get("task")
    if not isinstance(task, dict):
        raise ConfigError(f"{path}: missing [task] section")
    for key in ("name", "labels", "patterns", "verbalizers"):
        if key not in task:
            raise ConfigError(f"{path}: missing task.{key}")

    labels = [str(l) for l in task["labels"]]
    label_set = LabelSet(tuple(labels))
    arity = int(task.get("arity", 1))
    if arity < 1:
        raise ConfigError(f"{path}: arity must be >= 1")

    patterns = tuple(parse_pattern_dsl(p) for p in task["patterns"])
    for i, pattern in enumerate(patterns):
        bad = [s for s in pattern.segment_indices if s >= arity]
        if bad:
            raise ConfigError(
                f"{path}: pattern {i} references segment(s) {bad} but arity is {arity}"
            )

    tables = task["verbalizers"]
    if isinstance(tables, dict):
        tables = [tables]
    verbalizers = []
    for table in tables:
        mapping = {str(k): str(v) for k, v in table.items()}
        if set(mapping) != set(labels):
            raise ConfigError(
                f"{path}: verbalizer labels {sorted(mapping)} do not match task labels {sorted(labels)}"
            )
        verbalizers.append(Verbalizer(mapping))

    return TaskSpec(
        name=str(task["name"]),
        label_set=label_set,
        arity=arity,
        patterns=patterns,
        verbalizers=tuple(verbalizers),
    )
