"""Run the adapter with uvicorn: `editloop-adapter [--host H] [--port P]`."""

from __future__ import annotations

import argparse

import uvicorn

from .app import create_app
from .config import AdapterConfig, DEFAULT_MAX_IMAGE_BYTES


def main() -> None:
    parser = argparse.ArgumentParser(description="editloop adapter service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8080)
    parser.add_argument("--mode", default="stub", choices=["stub"],
                        help="stub: identity editor, full-frame segmenter, echo MLLM")
    parser.add_argument("--max-image-bytes", type=int, default=DEFAULT_MAX_IMAGE_BYTES)
    args = parser.parse_args()
    config = AdapterConfig(
        host=args.host, port=args.port, mode=args.mode,
        max_image_bytes=args.max_image_bytes,
    )
    uvicorn.run(create_app(config), host=config.host, port=config.port)


if __name__ == "__main__":
    main()
