"""Startup flags mirror AdapterConfig; serves the app with uvicorn."""

from __future__ import annotations

import argparse
import logging

from .app import create_app, load_templates
from .model import DEFAULT_TAGS, AdapterConfig, CausalBackbone


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kbrag-adapter")
    parser.add_argument("--model", required=True, help="HF model identifier or local path")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-context", type=int, default=1024)
    parser.add_argument("--max-new-tokens", type=int, default=48)
    parser.add_argument("--tag-mode", choices=["add", "map"], default="add")
    parser.add_argument("--tags", default=",".join(DEFAULT_TAGS), help="comma-separated tag strings")
    parser.add_argument("--prompts", help="prompt template directory (default: shipped pack)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8800)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    config = AdapterConfig(
        model_id=args.model,
        device=args.device,
        max_context=args.max_context,
        max_new_tokens=args.max_new_tokens,
        tag_mode=args.tag_mode,
        tags=tuple(t.strip() for t in args.tags.split(",") if t.strip()),
        host=args.host,
        port=args.port,
    )
    backbone = CausalBackbone.from_pretrained(config)
    app = create_app(backbone, load_templates(args.prompts))

    import uvicorn

    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
