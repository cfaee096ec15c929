"""Request loop: newline-delimited JSON over stdio or TCP.

One `{"type":"hello","token_dim":D}` line opens every session, then each
`process` request gets exactly one `result` or `error` reply. Per-request
failures (unreadable frame, inference fault) produce an error message and the
loop stays alive; malformed JSON is answered with an error carrying id -1.
"""

from __future__ import annotations

import json
import socketserver
import sys
from dataclasses import dataclass

from .engines import FixtureEngine, FrameLookupError, TorchScriptEngine
from .poses import anchor_relative_wire_poses


@dataclass
class BridgeConfig:
    fixture: str | None = None       # recorded-output mode
    checkpoint: str | None = None    # TorchScript bundle mode
    device: str = "cpu"
    tcp_port: int | None = None      # None = stdio

    def build_engine(self):
        if self.fixture is not None:
            return FixtureEngine(self.fixture)
        if self.checkpoint is not None:
            return TorchScriptEngine(self.checkpoint, device=self.device)
        raise ValueError("config needs a fixture file or a model checkpoint")


def _error(req_id, message: str) -> dict:
    return {"type": "error", "id": req_id, "message": str(message)}


def handle_line(engine, line: str) -> dict:
    """One request in, one reply out; never raises for request-level faults."""
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as e:
        return _error(-1, f"malformed JSON: {e}")
    if not isinstance(doc, dict):
        return _error(-1, "message is not an object")
    req_id = doc.get("id", -1)
    if doc.get("type") != "process":
        return _error(req_id, f"unsupported message type {doc.get('type')!r}")
    frames = doc.get("frames")
    if not isinstance(frames, list) or not frames:
        return _error(req_id, "request carries no frames")
    if doc.get("anchor") is not None and doc["anchor"] != frames[0]:
        return _error(req_id, "anchor must be the first frame")
    try:
        extrinsics, tokens = engine.infer([str(f) for f in frames])
    except FrameLookupError as e:
        return _error(req_id, str(e))
    except Exception as e:
        return _error(req_id, f"inference failed: {e}")
    if engine.token_dim is not None and tokens.shape[1] != engine.token_dim:
        return _error(req_id, "engine produced tokens of unexpected dimension")
    return {"type": "result", "id": req_id,
            "poses": anchor_relative_wire_poses(extrinsics),
            "tokens": [[float(v) for v in row] for row in tokens]}


def hello_line(engine) -> str:
    return json.dumps({"type": "hello", "token_dim": engine.token_dim})


def serve_streams(engine, rfile, wfile) -> None:
    """Run one session over a pair of text streams."""
    wfile.write(hello_line(engine) + "\n")
    wfile.flush()
    for line in rfile:
        if not line.strip():
            continue
        wfile.write(json.dumps(handle_line(engine, line)) + "\n")
        wfile.flush()


def serve(config: BridgeConfig) -> None:
    """Serve forever: stdio by default, TCP when a port is configured."""
    engine = config.build_engine()
    if config.tcp_port is None:
        serve_streams(engine, sys.stdin, sys.stdout)
        return

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            rfile = self.rfile
            wfile = self.wfile

            class _W:
                @staticmethod
                def write(s):
                    wfile.write(s.encode("utf-8"))

                @staticmethod
                def flush():
                    wfile.flush()

            serve_streams(engine, (l.decode("utf-8") for l in rfile), _W)

    with socketserver.ThreadingTCPServer(("0.0.0.0", config.tcp_port), Handler) as srv:
        srv.serve_forever()
