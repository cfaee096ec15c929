"""Backend-protocol service for a pretrained multi-view geometry model.

Given a window of image paths (anchor first), the bridge runs one inference
pass, converts the predicted world-to-camera extrinsics into anchor-relative
camera-to-world poses, extracts one encoder summary token per frame, and
answers over newline-delimited JSON on stdio or TCP.
"""

from .engines import FixtureEngine, FrameLookupError, TorchScriptEngine
from .server import BridgeConfig, serve

__all__ = ["BridgeConfig", "FixtureEngine", "FrameLookupError",
           "TorchScriptEngine", "serve"]

__version__ = "0.1.0"
