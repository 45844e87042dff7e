"""Turn parsing, argument validation and observation serialization.

Policy output is UTF-8 text made of tagged blocks::

    <think>free text</think>
    <tool_call>{"name": "segment_points", "args": {"points": [[x, y, 1]]}}</tool_call>
    <answer>{"items": [{"points": [[x, y, 1]]}, {"box": [x0, y0, x1, y1]}], "note": "..."}</answer>

Parsing is total: every string yields either a turn with an ``ok`` verdict or
no turn and exactly one violation kind.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from .geom import BBox, PointPrompt

TOOL_NAMES = ("zoom_in", "rotate", "segment_points", "segment_box")
SEGMENT_TOOLS = frozenset({"segment_points", "segment_box"})
VIEW_TOOLS = frozenset({"zoom_in", "rotate"})

ViolationKind = Literal["unparsable", "missing_block", "unknown_tool", "bad_args", "multiple_answers"]
VIOLATION_KINDS: tuple[str, ...] = ("unparsable", "missing_block", "unknown_tool", "bad_args", "multiple_answers")

_OPEN_RE = re.compile(r"<(think|tool_call|answer)>")
_ANY_TAG_RE = re.compile(r"</?(think|tool_call|answer)>")


class _Violation(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(detail)
        self.kind = kind
        self.detail = detail


@dataclass(frozen=True)
class ToolCall:
    name: str
    args: dict = field(default_factory=dict)

    @property
    def points(self) -> list[PointPrompt]:
        return [PointPrompt(x, y, bool(pol)) for x, y, pol in self.args["points"]]

    @property
    def box(self) -> BBox:
        return BBox(*self.args["box"])

    @property
    def crop(self) -> BBox:
        return BBox(*self.args["crop"])

    @property
    def angle(self) -> int:
        return self.args["angle"]

    def to_json(self) -> dict:
        return {"name": self.name, "args": self.args}


@dataclass(frozen=True)
class AnswerItem:
    points: tuple[PointPrompt, ...] | None = None
    box: BBox | None = None

    def __post_init__(self) -> None:
        if (self.points is None) == (self.box is None):
            raise ValueError("an answer item carries exactly one of points or box")

    def to_json(self) -> dict:
        if self.points is not None:
            return {"points": [[p.x, p.y, int(p.positive)] for p in self.points]}
        return {"box": self.box.as_list()}


@dataclass(frozen=True)
class AnswerPayload:
    items: tuple[AnswerItem, ...]
    note: str | None = None

    def to_json(self) -> dict:
        out: dict[str, Any] = {"items": [it.to_json() for it in self.items]}
        if self.note is not None:
            out["note"] = self.note
        return out


@dataclass(frozen=True)
class AgentTurn:
    think: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()
    answer: AnswerPayload | None = None

    def __post_init__(self) -> None:
        if bool(self.tool_calls) == (self.answer is not None):
            raise ValueError("a turn carries either tool calls or an answer")

    @property
    def is_answer(self) -> bool:
        return self.answer is not None


@dataclass(frozen=True)
class FormatVerdict:
    status: Literal["ok", "violation"] = "ok"
    violation_kind: str | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @classmethod
    def violation(cls, kind: str, detail: str = "") -> "FormatVerdict":
        return cls("violation", kind, detail)


OK = FormatVerdict()


# --- parsing -------------------------------------------------------------------


def _split_blocks(raw: str) -> list[tuple[str, str]]:
    blocks = []
    pos, n = 0, len(raw)
    while True:
        while pos < n and raw[pos].isspace():
            pos += 1
        if pos == n:
            return blocks
        m = _OPEN_RE.match(raw, pos)
        if m is None:
            raise _Violation("unparsable", f"unexpected text at offset {pos}")
        name = m.group(1)
        close = f"</{name}>"
        end = raw.find(close, m.end())
        if end < 0:
            raise _Violation("unparsable", f"missing {close}")
        body = raw[m.end():end]
        if _ANY_TAG_RE.search(body):
            raise _Violation("unparsable", f"nested or unbalanced tag inside <{name}>")
        blocks.append((name, body))
        pos = end + len(close)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _check_box(v: Any, what: str) -> list[int]:
    if not (isinstance(v, list) and len(v) == 4 and all(_is_int(c) for c in v)):
        raise _Violation("bad_args", f"{what} must be four integers")
    return list(v)


def _check_points(v: Any) -> list[list[int]]:
    if not isinstance(v, list) or not v:
        raise _Violation("bad_args", "points must be a non-empty list")
    out = []
    for p in v:
        if not (isinstance(p, list) and len(p) == 3 and all(_is_int(c) for c in p)):
            raise _Violation("bad_args", "each point is [x, y, polarity]")
        if p[2] not in (0, 1):
            raise _Violation("bad_args", "polarity must be 0 or 1")
        out.append(list(p))
    return out


def _check_angle(v: Any) -> int:
    if not _is_int(v):
        raise _Violation("bad_args", "angle must be an integer")
    return v


def _check_keys(obj: dict, allowed: set[str], required: set[str], what: str) -> None:
    keys = set(obj)
    if not required <= keys or not keys <= allowed:
        raise _Violation("bad_args", f"{what} keys must be {sorted(required)} (optional {sorted(allowed - required)})")


_ARG_SCHEMA = {
    "zoom_in": ("crop", lambda v: _check_box(v, "crop")),
    "rotate": ("angle", _check_angle),
    "segment_points": ("points", _check_points),
    "segment_box": ("box", lambda v: _check_box(v, "box")),
}


def _tool_call(obj: Any) -> ToolCall:
    if not isinstance(obj, dict) or not isinstance(obj.get("name"), str):
        raise _Violation("bad_args", "tool call must be an object with a string name")
    name = obj["name"]
    if name not in TOOL_NAMES:
        raise _Violation("unknown_tool", f"unknown tool {name!r}")
    _check_keys(obj, {"name", "args"}, {"name", "args"}, "tool call")
    args = obj["args"]
    if not isinstance(args, dict):
        raise _Violation("bad_args", "args must be an object")
    key, check = _ARG_SCHEMA[name]
    _check_keys(args, {key}, {key}, f"{name} args")
    return ToolCall(name, {key: check(args[key])})


def _answer(obj: Any) -> AnswerPayload:
    if not isinstance(obj, dict):
        raise _Violation("bad_args", "answer must be an object")
    _check_keys(obj, {"items", "note"}, {"items"}, "answer")
    items = obj["items"]
    if not isinstance(items, list) or not items:
        raise _Violation("bad_args", "answer needs at least one item")
    note = obj.get("note")
    if note is not None and not isinstance(note, str):
        raise _Violation("bad_args", "note must be a string")
    parsed = []
    for it in items:
        if not isinstance(it, dict) or len(it) != 1 or not set(it) <= {"points", "box"}:
            raise _Violation("bad_args", "each item is {'points': ...} or {'box': ...}")
        if "points" in it:
            pts = tuple(PointPrompt(x, y, bool(p)) for x, y, p in _check_points(it["points"]))
            parsed.append(AnswerItem(points=pts))
        else:
            parsed.append(AnswerItem(box=BBox(*_check_box(it["box"], "box"))))
    return AnswerPayload(tuple(parsed), note)


def _parse(raw: str) -> AgentTurn:
    blocks = _split_blocks(raw)
    names = [b[0] for b in blocks]
    if names.count("think") > 1 or ("think" in names and names[0] != "think"):
        raise _Violation("unparsable", "at most one <think> block, and it must come first")
    decoded = []
    for name, body in blocks:
        if name == "think":
            continue
        try:
            decoded.append((name, json.loads(body)))
        except json.JSONDecodeError as exc:
            raise _Violation("unparsable", f"invalid JSON in <{name}>: {exc.msg}") from None
    n_answers = names.count("answer")
    if n_answers > 1 or (n_answers and "tool_call" in names):
        raise _Violation("multiple_answers", "a turn carries one answer and no tool calls alongside it")
    if not decoded:
        raise _Violation("missing_block", "no <tool_call> or <answer> block")
    think = blocks[0][1] if names[0] == "think" else None
    if n_answers:
        return AgentTurn(think=think, answer=_answer(decoded[0][1]))
    objs = [obj for _, obj in decoded]
    # unknown tools outrank schema problems anywhere in the turn
    for obj in objs:
        if isinstance(obj, dict) and isinstance(obj.get("name"), str) and obj["name"] not in TOOL_NAMES:
            raise _Violation("unknown_tool", f"unknown tool {obj['name']!r}")
    return AgentTurn(think=think, tool_calls=tuple(_tool_call(o) for o in objs))


class MalformedResponse(str):
    """Raw text a transport could not deliver as a turn; always parses as unparsable."""

    detail: str

    def __new__(cls, text: str, detail: str = "") -> "MalformedResponse":
        obj = super().__new__(cls, text)
        obj.detail = detail
        return obj


def parse_turn(raw: str) -> tuple[AgentTurn | None, FormatVerdict]:
    if isinstance(raw, MalformedResponse):
        return None, FormatVerdict.violation("unparsable", raw.detail or "malformed response frame")
    if not isinstance(raw, str):
        return None, FormatVerdict.violation("unparsable", "turn is not text")
    try:
        return _parse(raw), OK
    except _Violation as v:
        return None, FormatVerdict.violation(v.kind, v.detail)


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def serialize_turn(turn: AgentTurn) -> str:
    parts = []
    if turn.think is not None:
        if _ANY_TAG_RE.search(turn.think):
            raise ValueError("think text may not contain block tags")
        parts.append(f"<think>{turn.think}</think>")
    if turn.answer is not None:
        parts.append(f"<answer>{_dumps(turn.answer.to_json())}</answer>")
    for call in turn.tool_calls:
        parts.append(f"<tool_call>{_dumps(call.to_json())}</tool_call>")
    return "".join(parts)


# --- argument validation --------------------------------------------------------


def validate_args(call: ToolCall, scene_size: tuple[int, int], view) -> str | None:
    """Bounds-check ``call`` against the current view; returns a problem or None."""
    vw, vh = view.size
    sw, sh = scene_size
    if not (0 <= view.crop.x0 < view.crop.x1 <= sw and 0 <= view.crop.y0 < view.crop.y1 <= sh):
        return "view lies outside the scene"

    def inside_box(b: BBox) -> bool:
        return 0 <= b.x0 < b.x1 <= vw and 0 <= b.y0 < b.y1 <= vh

    if call.name == "zoom_in":
        if not inside_box(call.crop):
            return f"crop {call.crop.as_list()} is empty or exceeds the {vw}x{vh} view"
    elif call.name == "rotate":
        if call.angle % 90 != 0:
            return f"rotation {call.angle} is not a right angle"
    elif call.name == "segment_points":
        pts = call.points
        for p in pts:
            if not (0 <= p.x < vw and 0 <= p.y < vh):
                return f"point ({p.x}, {p.y}) outside the {vw}x{vh} view"
        if not any(p.positive for p in pts):
            return "no positive point"
    elif call.name == "segment_box":
        if not inside_box(call.box):
            return f"box {call.box.as_list()} is empty or exceeds the {vw}x{vh} view"
    else:
        return f"unknown tool {call.name!r}"
    return None


# --- observations ----------------------------------------------------------------


def encode_grid(grid: np.ndarray) -> dict:
    grid = np.ascontiguousarray(grid, dtype=np.uint8)
    return {"size": list(grid.shape), "data": base64.b64encode(grid.tobytes()).decode("ascii")}


def decode_grid(obj: dict) -> np.ndarray:
    h, w = obj["size"]
    return np.frombuffer(base64.b64decode(obj["data"]), dtype=np.uint8).reshape(h, w)


def observation_payload(obs, images: bool = True) -> dict:
    view = obs.view
    payload: dict[str, Any] = {
        "question": obs.question,
        "turn_index": obs.turn_index,
        "budget_remaining": obs.budget_remaining,
        "context_digest": obs.context_digest,
        "scene_size": list(obs.scene_size),
        "view": {"crop": view.crop.as_list(), "rotation": view.rotation, "size": list(view.size)},
        "events": [e.to_json() for e in obs.events],
    }
    if images:
        payload["image"] = encode_grid(obs.view_image())
        payload["history_pool"] = [{"candidate": k, **encode_grid(th)} for k, th in obs.history_pool]
    else:
        payload["history_pool"] = [{"candidate": k} for k, _ in obs.history_pool]
    return payload


def serialize_observation(obs, images: bool = True) -> str:
    return _dumps(observation_payload(obs, images))
