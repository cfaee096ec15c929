"""Entry point: `model-bridge --fixture recorded.json` or
`model-bridge --checkpoint model.ts --device cuda [--tcp PORT]`."""

from __future__ import annotations

import argparse
import sys

from .server import BridgeConfig, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="model-bridge",
                                     description="Serve a multi-view geometry model "
                                                 "over the backend wire protocol")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--fixture", help="recorded-output JSON file")
    source.add_argument("--checkpoint", help="TorchScript model bundle")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--tcp", type=int, default=None, metavar="PORT",
                        help="listen on TCP instead of stdio")
    args = parser.parse_args(argv)
    config = BridgeConfig(fixture=args.fixture, checkpoint=args.checkpoint,
                          device=args.device, tcp_port=args.tcp)
    try:
        serve(config)
    except KeyboardInterrupt:
        pass
    except Exception as e:
        print(f"bridge error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
