"""Inference engines behind the bridge.

An engine maps a window of frame references to per-frame world-to-camera
extrinsics and encoder summary tokens:

    infer(refs) -> (extrinsics (n, 4, 4) or (n, 3, 4), tokens (n, D))

Two implementations ship:

* FixtureEngine replays recorded outputs from a JSON file, keyed by frame
  reference. It needs no model runtime and backs protocol tests and offline
  replay.
* TorchScriptEngine runs a TorchScript bundle exported from a pretrained
  multi-view geometry model. The bundle contract is
  module(images: float32 (n, 3, H, W)) -> (extrinsics (n, 4, 4) world-to-camera,
  tokens (n, D)); export whatever pose head and encoder CLS extraction the
  source model uses into that signature.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class FrameLookupError(KeyError):
    """A requested frame reference has no recorded or loadable data."""


class FixtureEngine:
    """Replays recorded per-frame extrinsics and tokens from a fixture file.

    Fixture schema::

        {"token_dim": D,
         "frames": {"<ref>": {"world_to_camera": [[...4 floats...] x 3 or 4],
                              "token": [...D floats...]}, ...}}
    """

    def __init__(self, fixture_path: str | Path):
        with open(fixture_path, encoding="utf-8") as f:
            doc = json.load(f)
        self.token_dim = int(doc["token_dim"])
        self.frames = doc["frames"]
        for ref, entry in self.frames.items():
            if len(entry["token"]) != self.token_dim:
                raise ValueError(f"frame {ref!r} token length != token_dim")

    def infer(self, refs: list[str]) -> tuple[np.ndarray, np.ndarray]:
        extrinsics = []
        tokens = []
        for ref in refs:
            if ref not in self.frames:
                raise FrameLookupError(f"no recorded frame {ref!r}")
            entry = self.frames[ref]
            extrinsics.append(np.asarray(entry["world_to_camera"], dtype=np.float64))
            tokens.append(np.asarray(entry["token"], dtype=np.float64))
        return np.stack([e if e.shape == (4, 4) else np.vstack([e, [0, 0, 0, 1]])
                         for e in extrinsics]), np.stack(tokens)


class TorchScriptEngine:
    """Runs an exported TorchScript multi-view geometry bundle on image paths."""

    def __init__(self, checkpoint: str | Path, device: str = "cpu",
                 image_size: int = 224):
        try:
            import torch
        except ImportError as e:
            raise RuntimeError(
                "TorchScriptEngine needs torch; install the 'model' extra") from e
        self._torch = torch
        self.device = device
        self.image_size = image_size
        self.module = torch.jit.load(str(checkpoint), map_location=device)
        self.module.eval()
        self.token_dim = int(getattr(self.module, "token_dim", 0)) or None

    def _load_images(self, refs: list[str]):
        try:
            from PIL import Image
        except ImportError as e:
            raise RuntimeError("image loading needs Pillow") from e
        torch = self._torch
        batch = []
        for ref in refs:
            path = Path(ref)
            if not path.exists():
                raise FrameLookupError(f"image not readable: {ref!r}")
            img = Image.open(path).convert("RGB").resize((self.image_size,
                                                          self.image_size))
            arr = np.asarray(img, dtype=np.float32) / 255.0
            batch.append(torch.from_numpy(arr).permute(2, 0, 1))
        return torch.stack(batch).to(self.device)

    def infer(self, refs: list[str]) -> tuple[np.ndarray, np.ndarray]:
        torch = self._torch
        images = self._load_images(refs)
        with torch.no_grad():
            extrinsics, tokens = self.module(images)
        extrinsics = extrinsics.cpu().numpy().astype(np.float64)
        tokens = tokens.cpu().numpy().astype(np.float64)
        if self.token_dim is None:
            self.token_dim = tokens.shape[1]
        return extrinsics, tokens
