"""Run the guidance service: python -m sketchforge_service [--host] [--port]."""

import argparse

import uvicorn

from .app import create_app
from .bundles import load_bundle


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(prog="sketchforge-service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8421)
    parser.add_argument("--bundle", default="synthetic",
                        choices=("synthetic", "pretrained"))
    args = parser.parse_args(argv)
    app = create_app(load_bundle(args.bundle))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


if __name__ == "__main__":
    main()
