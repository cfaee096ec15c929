"""Drive the window pipeline against a remote backend over the wire protocol.

A toy inference service runs on a local TCP port speaking newline-delimited
JSON; the core consumes it through RemoteBackend exactly as it would a real
model service (see the model_bridge package for one that wraps an actual
model or a recorded fixture).

Run: python3 demos/05_wire_protocol.py
"""

import json
import math
import socketserver
import threading

from kfvo.backend import BackendRequest, RemoteBackend
from kfvo.run import FrameInput, KeepAllStrategy, run_sequence


class ToyServiceHandler(socketserver.StreamRequestHandler):
    """Pretends to estimate poses: frames sit on a line, 0.1 m apart."""

    def handle(self):
        self.wfile.write((json.dumps({"type": "hello", "token_dim": 8}) + "\n").encode())
        for line in self.rfile:
            req = json.loads(line)
            ids = [int(ref.split("_")[1]) for ref in req["frames"]]
            anchor = ids[0]
            poses = [{"t": [0.1 * (i - anchor), 0.0, 0.0], "q": [0, 0, 0, 1]}
                     for i in ids]
            tokens = [[math.sin(0.3 * i + d) for d in range(8)] for i in ids]
            reply = {"type": "result", "id": req["id"], "poses": poses, "tokens": tokens}
            self.wfile.write((json.dumps(reply) + "\n").encode())


server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), ToyServiceHandler)
threading.Thread(target=server.serve_forever, daemon=True).start()
endpoint = f"tcp://127.0.0.1:{server.server_address[1]}"
print(f"toy service listening at {endpoint}")

with RemoteBackend(endpoint, timeout=10.0) as backend:
    one = backend.process(BackendRequest([0, 1, 2], ["img_0", "img_1", "img_2"]))
    print(f"handshake token_dim={backend.token_dim}; "
          f"single request -> {len(one.rel_poses)} anchor-relative poses")

    frames = [FrameInput(i, f"img_{i}", 0.1 * i) for i in range(15)]
    result = run_sequence(backend, frames, KeepAllStrategy())
    xs = [round(float(p.t[0]), 2) for _, p in result.trajectory.entries]
    print(f"full pipeline over 15 frames -> x positions {xs}")

server.shutdown()
server.server_close()
print("the same protocol reaches a real model through the model_bridge service.")
