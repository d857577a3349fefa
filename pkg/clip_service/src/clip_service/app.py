"""HTTP surface: POST /v1/embed per the shared wire protocol, GET /healthz.

Stateless request handling; the encoder is loaded once at startup. The
listen port comes from CLIP_SERVICE_PORT unless given on the command line.
"""

from __future__ import annotations

import argparse
import base64
import binascii
import json
import os

from aiohttp import web

from .encoder import BadImage, DeterministicEncoder, load_encoder

ENV_PORT = "CLIP_SERVICE_PORT"
DEFAULT_PORT = 8801


def build_app(encoder) -> web.Application:
    app = web.Application(client_max_size=16 * 1024 * 1024)

    async def healthz(request):
        return web.json_response({"ok": True, "model": encoder.model_name})

    async def embed(request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return web.json_response({"error": "bad_json"}, status=400)
        kind = body.get("kind")
        data = body.get("data")
        if not isinstance(data, str):
            return web.json_response({"error": "bad_data"}, status=400)
        if kind == "text":
            if not data:
                return web.json_response({"error": "empty_text"}, status=400)
            values = encoder.embed_text(data)
        elif kind == "image":
            try:
                raw = base64.b64decode(data, validate=True)
                values = encoder.embed_image(raw)
            except (binascii.Error, BadImage):
                return web.json_response({"error": "bad_image"}, status=400)
        else:
            return web.json_response({"error": "unknown_kind"}, status=400)
        return web.json_response(
            {"embedding": values, "model": encoder.model_name}
        )

    app.router.add_get("/healthz", healthz)
    app.router.add_post("/v1/embed", embed)
    return app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="clip-service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int,
                        default=int(os.environ.get(ENV_PORT, DEFAULT_PORT)))
    parser.add_argument("--encoder", choices=("clip", "deterministic"),
                        default="clip",
                        help="deterministic runs without model weights")
    args = parser.parse_args(argv)
    encoder = load_encoder(args.encoder)
    web.run_app(build_app(encoder), host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
