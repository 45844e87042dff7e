"""External policies over newline-delimited JSON.

The harness sends ``{"type":"obs","payload":{...}}`` and expects
``{"type":"turn","raw":"..."}`` back, one frame per line. ``{"type":"end"}``
closes the session. The transport is either a child process's standard
streams or a TCP socket. A response that is not a valid turn frame becomes an
unparsable turn and the episode continues; a closed connection is fatal.
"""

from __future__ import annotations

import json
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass
from typing import IO

import numpy as np

from .errors import ProtocolError
from .geom import BBox
from .protocol import MalformedResponse, decode_grid, observation_payload
from .toyseg import ViewState

EXTERNAL_PREFIX = "external:"


def encode_frame(obj: dict) -> bytes:
    return (json.dumps(obj, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


def obs_frame(obs) -> bytes:
    return encode_frame({"type": "obs", "payload": observation_payload(obs, images=True)})


def turn_frame(raw: str) -> bytes:
    return encode_frame({"type": "turn", "raw": raw})


def decode_turn_frame(line: bytes) -> str:
    """Raw turn text from a response line, or a MalformedResponse."""
    text = line.decode("utf-8", errors="replace").rstrip("\r\n")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        return MalformedResponse(text, "response frame is not JSON")
    if not isinstance(obj, dict) or obj.get("type") != "turn" or not isinstance(obj.get("raw"), str):
        return MalformedResponse(text, "response is not a turn frame")
    return obj["raw"]


@dataclass(frozen=True)
class RemoteObservation:
    """What an external policy can reconstruct from an observation frame."""

    view: ViewState
    turn_index: int
    budget_remaining: int
    scene_size: tuple[int, int]
    question: str
    context_digest: str
    image: np.ndarray
    history_pool: tuple[tuple[int, np.ndarray], ...]
    events: tuple[dict, ...] = ()

    def view_image(self) -> np.ndarray:
        return self.image


def observation_from_payload(payload: dict) -> RemoteObservation:
    v = payload["view"]
    return RemoteObservation(
        view=ViewState(BBox(*v["crop"]), int(v["rotation"])),
        turn_index=int(payload["turn_index"]),
        budget_remaining=int(payload["budget_remaining"]),
        scene_size=tuple(payload["scene_size"]),
        question=payload.get("question", ""),
        context_digest=payload.get("context_digest", ""),
        image=decode_grid(payload["image"]),
        history_pool=tuple((int(e["candidate"]), decode_grid(e)) for e in payload.get("history_pool", ())),
        events=tuple(payload.get("events", ())),
    )


class WireConnection:
    """One request/response channel; requests from worker threads are serialized."""

    def __init__(self, reader: IO[bytes], writer: IO[bytes], on_close=None):
        self.reader = reader
        self.writer = writer
        self._lock = threading.Lock()
        self._on_close = on_close
        self.closed = False

    def request(self, obs) -> str:
        frame = obs_frame(obs)
        with self._lock:
            if self.closed:
                raise ProtocolError("connection already closed")
            try:
                self.writer.write(frame)
                self.writer.flush()
                line = self.reader.readline()
            except (OSError, ValueError) as exc:
                raise ProtocolError(f"lost connection to external policy: {exc}") from exc
        if not line:
            raise ProtocolError("external policy closed the connection")
        return decode_turn_frame(line)

    def close(self) -> None:
        with self._lock:
            if self.closed:
                return
            self.closed = True
            try:
                self.writer.write(encode_frame({"type": "end"}))
                self.writer.flush()
            except (OSError, ValueError):
                pass
        if self._on_close is not None:
            self._on_close()

    def __enter__(self) -> "WireConnection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def spawn(command: str | list[str]) -> WireConnection:
    """Start ``command`` and talk to it over its stdin/stdout."""
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    try:
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
    except OSError as exc:
        raise ProtocolError(f"cannot start external policy {argv}: {exc}") from exc

    def reap() -> None:
        try:
            proc.stdin.close()
            proc.wait(timeout=10)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
        proc.stdout.close()

    return WireConnection(proc.stdout, proc.stdin, on_close=reap)


def connect(host: str, port: int, timeout: float = 30.0) -> WireConnection:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ProtocolError(f"cannot reach external policy at {host}:{port}: {exc}") from exc
    sock.settimeout(None)
    reader = sock.makefile("rb")
    writer = sock.makefile("wb")

    def shut() -> None:
        for f in (reader, writer):
            f.close()
        sock.close()

    return WireConnection(reader, writer, on_close=shut)


def open_binding(spec: str) -> WireConnection:
    """``external:cmd:<command line>`` or ``external:tcp:<host>:<port>``."""
    if not spec.startswith(EXTERNAL_PREFIX):
        raise ValueError(f"not an external binding: {spec!r}")
    kind, _, rest = spec[len(EXTERNAL_PREFIX):].partition(":")
    if kind == "cmd" and rest.strip():
        return spawn(rest)
    if kind == "tcp":
        host, _, port = rest.rpartition(":")
        if host and port.isdigit():
            return connect(host, int(port))
    raise ValueError(f"bad external binding {spec!r}; use external:cmd:<command> or external:tcp:<host>:<port>")


class ExternalPolicy:
    """Adapts a connection to the in-process ``act(obs) -> str`` interface."""

    def __init__(self, conn: WireConnection):
        self.conn = conn

    def act(self, obs) -> str:
        return self.conn.request(obs)
