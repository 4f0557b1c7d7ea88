"""Editing tasks, cases and conditions shared by the scorers, data pipeline and bench."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class EditTask(str, enum.Enum):
    ADDITION = "addition"
    REMOVAL = "removal"
    OBJECT_SWAP = "object_swap"
    BACKGROUND_REPLACE = "background_replace"
    COLOR_CHANGE = "color_change"
    BOKEH = "bokeh"
    RELIGHTING = "relighting"
    STYLE_TRANSFER = "style_transfer"

    @classmethod
    def parse(cls, value) -> "EditTask":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            pass
        key = str(value).strip().lower()
        if key in _ALIASES:
            return _ALIASES[key]
        raise ValueError(f"unknown edit task {value!r}")


# benchmark column order
TASK_ORDER = (
    EditTask.ADDITION,
    EditTask.REMOVAL,
    EditTask.OBJECT_SWAP,
    EditTask.BACKGROUND_REPLACE,
    EditTask.COLOR_CHANGE,
    EditTask.BOKEH,
    EditTask.RELIGHTING,
    EditTask.STYLE_TRANSFER,
)

TASK_LABELS = {
    EditTask.ADDITION: "Add",
    EditTask.REMOVAL: "Remove",
    EditTask.OBJECT_SWAP: "Obj. Swap",
    EditTask.BACKGROUND_REPLACE: "Bg. Replace",
    EditTask.COLOR_CHANGE: "Color",
    EditTask.BOKEH: "Bokeh",
    EditTask.RELIGHTING: "Relighting",
    EditTask.STYLE_TRANSFER: "Style",
}

TASK_COLUMNS = {
    EditTask.ADDITION: "add",
    EditTask.REMOVAL: "remove",
    EditTask.OBJECT_SWAP: "obj_swap",
    EditTask.BACKGROUND_REPLACE: "bg_replace",
    EditTask.COLOR_CHANGE: "color",
    EditTask.BOKEH: "bokeh",
    EditTask.RELIGHTING: "relighting",
    EditTask.STYLE_TRANSFER: "style",
}

_ALIASES = {}
for _t in EditTask:
    for _name in (TASK_LABELS[_t], TASK_COLUMNS[_t]):
        _ALIASES[_name.lower()] = _t
_ALIASES.update({
    "background replace": EditTask.BACKGROUND_REPLACE,
    "relight": EditTask.RELIGHTING,
    "stylize": EditTask.STYLE_TRANSFER,
    "object swap": EditTask.OBJECT_SWAP,
})


@dataclass(frozen=True)
class Condition:
    id: str
    embedding: tuple[float, ...] = ()
    task: EditTask | None = None
    instruction: str = ""


def point_ref(point) -> str:
    """Payload reference for a generated low-dimensional output."""
    return "point:" + ",".join(repr(float(v)) for v in point)


@dataclass(frozen=True)
class EditCase:
    """One (input, instruction, output) editing triple plus bookkeeping."""

    id: str
    task: EditTask
    instruction: str = ""
    category_hint: str | None = None
    input_embedding: tuple[float, ...] = ()
    input_ref: str | None = None
    output_ref: str | None = None
    terminal_point: tuple[float, ...] | None = None
    condition: tuple[float, ...] | None = None
    category: str | None = None
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def has_output(self) -> bool:
        return self.terminal_point is not None or self.output_ref is not None

    def to_condition(self) -> Condition:
        return Condition(self.id, tuple(self.condition or ()), self.task, self.instruction)

    def to_record(self, score: float | None = None) -> dict:
        rec = {
            "id": self.id,
            "task": self.task.value,
            "instruction": self.instruction,
            "category_hint": self.category_hint,
            "input": {"embedding": list(self.input_embedding), "payload_ref": self.input_ref},
        }
        if self.has_output:
            rec["output"] = {
                "payload_ref": self.output_ref,
                "terminal_point": None if self.terminal_point is None else list(self.terminal_point),
            }
        if self.condition is not None:
            rec["condition"] = list(self.condition)
        if self.category is not None:
            rec["category"] = self.category
        if score is not None:
            rec["score"] = score
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EditCase":
        if not isinstance(rec, dict):
            raise ValueError("record must be a JSON object")
        missing = [k for k in ("id", "task") if k not in rec]
        if missing:
            raise ValueError(f"missing required field(s): {', '.join(missing)}")
        known = {"id", "task", "instruction", "category_hint", "input", "output", "score",
                 "condition", "category"}
        unknown = sorted(set(rec) - known)
        if unknown:
            raise ValueError(f"unknown field(s): {', '.join(unknown)}")
        inp = rec.get("input") or {}
        out = rec.get("output")
        if not isinstance(inp, dict) or (out is not None and not isinstance(out, dict)):
            raise ValueError("'input' and 'output' must be objects")
        point = None if out is None else out.get("terminal_point")
        cond = rec.get("condition")
        return cls(
            id=str(rec["id"]),
            task=EditTask.parse(rec["task"]),
            instruction=str(rec.get("instruction") or ""),
            category_hint=rec.get("category_hint"),
            input_embedding=tuple(float(v) for v in inp.get("embedding") or ()),
            input_ref=inp.get("payload_ref"),
            output_ref=None if out is None else out.get("payload_ref"),
            terminal_point=None if point is None else tuple(float(v) for v in point),
            condition=None if cond is None else tuple(float(v) for v in cond),
            category=rec.get("category"),
        )
