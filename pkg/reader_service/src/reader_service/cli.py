import argparse
import sys

from .config import ServiceConfig
from .service import serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="reader-service",
        description="Serve the reader wire protocol over HTTP.",
    )
    parser.add_argument("--port", type=int, default=8237)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--mode", choices=["stub", "model"], default="stub")
    parser.add_argument("--seed", type=int, default=0, help="stub-mode encoding seed")
    parser.add_argument("--dim", type=int, default=16, help="stub-mode embedding dimension")
    parser.add_argument("--model", default=None, help="model-mode pretrained QA model id")
    parser.add_argument("--max-batch", type=int, default=256)
    args = parser.parse_args(argv)
    config = ServiceConfig(
        port=args.port,
        host=args.host,
        mode=args.mode,
        seed=args.seed,
        model_id=args.model,
        d=args.dim,
        max_batch=args.max_batch,
    )
    try:
        config.validate()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    serve(config)
    return 0


if __name__ == "__main__":
    sys.exit(main())
