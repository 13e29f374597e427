"""Entry point: ``lora-eval-bridge --testbed <path>`` (or ``python -m
eval_bridge``) serves evaluation requests on stdin until it closes."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .model import TestbedError, load_testbed
from .server import BridgeConfig, serve
from .tensorfile import TensorFormatError


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="lora-eval-bridge",
        description="Score merged deltas over an exported testbed via stdin/stdout JSON lines.",
    )
    parser.add_argument("--testbed", required=True, help="testbed.json from an export")
    parser.add_argument("--log", help="append one line per handled request to this file")
    args = parser.parse_args(argv)

    try:
        bed = load_testbed(args.testbed)
    except (TestbedError, TensorFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    config = BridgeConfig(
        testbed=Path(args.testbed),
        tasks=sorted(bed.tasks),
        log=Path(args.log) if args.log else None,
    )

    log = open(config.log, "a") if config.log else None
    try:
        return serve(bed, sys.stdin, sys.stdout, log=log)
    finally:
        if log is not None:
            log.close()


if __name__ == "__main__":
    sys.exit(main())
