"""Serve an observation-only scripted policy over the wire protocol.

    python -m segloop.agent greedy-centroid            # stdin/stdout
    python -m segloop.agent tool-only --tcp 7777       # TCP, one policy per client

A fresh policy instance starts whenever an observation arrives with
``turn_index == 0``.
"""

from __future__ import annotations

import json
import socketserver
import sys
from typing import IO

import click

from .bridge import observation_from_payload, turn_frame
from .policies import GreedyCentroidPolicy, ToolOnlyPolicy

SERVABLE = {"greedy-centroid": GreedyCentroidPolicy, "tool-only": ToolOnlyPolicy}

__all__ = ["SERVABLE", "serve"]


def serve(name: str, reader: IO[bytes], writer: IO[bytes]) -> int:
    """Answer observation frames until ``end`` or EOF; returns the number of turns served."""
    factory = SERVABLE[name]
    policy = factory()
    served = 0
    for line in reader:
        if not line.strip():
            continue
        frame = json.loads(line)
        if frame.get("type") == "end":
            break
        if frame.get("type") != "obs":
            continue
        obs = observation_from_payload(frame["payload"])
        if obs.turn_index == 0:
            policy = factory()
        writer.write(turn_frame(policy.act(obs)))
        writer.flush()
        served += 1
    return served


@click.command()
@click.argument("policy", type=click.Choice(sorted(SERVABLE)))
@click.option("--tcp", "port", type=int, default=None, help="Listen on this TCP port instead of stdio.")
@click.option("--host", default="127.0.0.1", show_default=True)
def main(policy: str, port: int | None, host: str) -> None:
    if port is None:
        serve(policy, sys.stdin.buffer, sys.stdout.buffer)
        return

    class Handler(socketserver.StreamRequestHandler):
        def handle(self) -> None:
            serve(policy, self.rfile, self.wfile)

    socketserver.ThreadingTCPServer.allow_reuse_address = True
    with socketserver.ThreadingTCPServer((host, port), Handler) as srv:
        srv.serve_forever()


if __name__ == "__main__":
    main()
