"""
Florence-2 task registry.
Maps prompt tokens to their input requirements and output shape, loaded
from a declarative YAML file so new tasks need no code change.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Union

import yaml

from .errors import ConfigError, ErrorCode, ValidationError
from .paths import get_registry_path

logger = logging.getLogger(__name__)


class OutputKind(str, Enum):
    TEXT = "TEXT"
    BOXES_LABELS = "BOXES_LABELS"
    QUAD_BOXES_TEXT = "QUAD_BOXES_TEXT"
    POLYGONS_LABELS = "POLYGONS_LABELS"
    REGION_TEXT_PAIRS = "REGION_TEXT_PAIRS"


@dataclass(frozen=True)
class TaskSpec:
    token: str
    requires_text_input: bool
    output_kind: OutputKind
    description: str = ""

    def to_dict(self) -> dict:
        return {
            "token": self.token,
            "requires_text_input": self.requires_text_input,
            "output_kind": self.output_kind.value,
            "description": self.description,
        }


class TaskRegistry:
    """Immutable token -> TaskSpec table. Safe for concurrent reads."""

    def __init__(self, specs: Iterable[TaskSpec] = ()):
        table = {}
        for spec in specs:
            if spec.token in table:
                raise ConfigError(f"duplicate task token in registry: {spec.token}")
            table[spec.token] = spec
        self._specs = dict(sorted(table.items()))

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "TaskRegistry":
        specs = []
        for i, record in enumerate(records):
            try:
                token = str(record["token"])
                kind = OutputKind(str(record["output_kind"]))
            except KeyError as e:
                raise ConfigError(f"task record {i} is missing field {e}")
            except ValueError:
                raise ConfigError(
                    f"task record {i} has unknown output_kind {record.get('output_kind')!r}"
                )
            if not token:
                raise ConfigError(f"task record {i} has an empty token")
            specs.append(TaskSpec(
                token=token,
                requires_text_input=bool(record.get("requires_text_input", False)),
                output_kind=kind,
                description=str(record.get("description", "")),
            ))
        return cls(specs)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TaskRegistry":
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        registry = cls.from_records(data.get("tasks", []))
        logger.info(f"Loaded {len(registry)} tasks from {path}")
        return registry

    def lookup(self, token: str) -> Optional[TaskSpec]:
        """Return the spec for token, or None. Never raises."""
        return self._specs.get(token)

    def list_tasks(self) -> list[TaskSpec]:
        """All specs ordered lexicographically by token."""
        return list(self._specs.values())

    def to_json_ready(self) -> list[dict]:
        return [spec.to_dict() for spec in self.list_tasks()]

    def __contains__(self, token: str) -> bool:
        return token in self._specs

    def __len__(self) -> int:
        return len(self._specs)


_default_registry: Optional[TaskRegistry] = None


def default_registry() -> TaskRegistry:
    """The registry shipped in config/tasks.yaml, loaded once."""
    global _default_registry
    if _default_registry is None:
        _default_registry = TaskRegistry.from_file(get_registry_path())
    return _default_registry


def build_prompt(spec: TaskSpec, text_input: str = "") -> str:
    """
    Assemble the model prompt: the task token, followed directly by the text
    input for text-conditioned tasks.
    """
    if spec.requires_text_input:
        if not text_input:
            raise ValidationError(ErrorCode.MISSING_TEXT_INPUT, spec.token)
        return spec.token + text_input
    if text_input:
        logger.warning(f"Task {spec.token} takes no text input; discarding {text_input!r}")
    return spec.token
