"""CLI: run a capture described by a JSON config file."""

from __future__ import annotations

import argparse
import json
import sys

from .capture import CaptureConfig, GateLocatorError, capture


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="routelens-capture",
        description="Capture MoE router traces from a model checkpoint")
    parser.add_argument("--config", required=True, help="CaptureConfig JSON file")
    args = parser.parse_args(argv)
    try:
        summary = capture(CaptureConfig.load(args.config))
    except (GateLocatorError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
