"""Command-line client for the pipeline service.

Every verb (except ``serve``) builds a request model and posts it to the
service: in-process by default (the app is mounted on an ASGI transport, no
server needed), or to a running instance via ``--server URL``. Exit codes:
0 success, 2 config error, 3 I/O error, 4 checkpoint error.

Defaults can come from a flat ``key = value`` config file with one section
per verb (plus ``[backbone]``), selected with ``--config``; explicit flags
win over the file.
"""

from __future__ import annotations

import argparse
import asyncio
import configparser
import json
import sys
from pathlib import Path

import httpx

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4
_EXIT_BY_CODE = {"config": EXIT_CONFIG, "io": EXIT_IO, "checkpoint": EXIT_CHECKPOINT}

# (flag, type, help) per verb; bools get --x/--no-x pairs
_TRAIN_FIELDS = [
    ("epochs", int, "training epochs"),
    ("batch-size", int, "minibatch size"),
    ("lr", float, "initial learning rate"),
    ("lr-decay-factor", float, "multiplicative step decay"),
    ("lr-decay-epochs", "int_list", "comma-separated decay epochs"),
    ("momentum", float, "SGD momentum"),
    ("weight-decay", float, "L2 weight decay"),
    ("flip-prob", float, "horizontal flip probability"),
    ("jitter-prob", float, "brightness/contrast jitter probability"),
    ("gray-prob", float, "grayscale-conversion probability"),
]

_SSL_FIELDS = [
    ("tau", float, "contrastive temperature"),
    ("encoder-momentum", float, "key-encoder momentum"),
    ("alpha1", float, "contrastive loss weight"),
    ("alpha2", float, "region loss weight"),
    ("queue-capacity", int, "negative queue capacity"),
    ("queue-prefill", bool, "prefill the queue with random unit keys"),
    ("paper-literal-eq2", bool, "skip temperature on negative terms"),
]

_BACKBONE_FIELDS = [
    ("preset", str, "baseline | one_attn | five_attns"),
    ("input-size", int, "square input size"),
    ("num-classes", int, "classifier head width"),
]


def _add_fields(parser: argparse.ArgumentParser, fields) -> None:
    for flag, ftype, help_text in fields:
        name = f"--{flag}"
        if ftype is bool:
            parser.add_argument(name, action=argparse.BooleanOptionalAction,
                                default=None, help=help_text)
        else:
            parser.add_argument(name, type=str, default=None, help=help_text)


def _cast(value: str, ftype):
    if ftype is int:
        return int(value)
    if ftype is float:
        return float(value)
    if ftype is bool:
        return value if isinstance(value, bool) else value.lower() in ("1", "true", "yes")
    if ftype == "int_list":
        value = value.strip()
        return [int(v) for v in value.split(",") if v] if value else []
    return value


def _collect(args, config: configparser.ConfigParser, section: str, fields) -> dict:
    """CLI flag > config-file entry > schema default (omitted)."""
    payload = {}
    for flag, ftype, _ in fields:
        attr = flag.replace("-", "_")
        value = getattr(args, attr, None)
        if value is None and config.has_option(section, attr):
            value = config.get(section, attr)
        if value is not None:
            payload[attr] = _cast(value, ftype)
    return payload


def _load_config(path: str | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path:
        if not Path(path).exists():
            print(f"error: config file not found: {path}", file=sys.stderr)
            raise SystemExit(EXIT_IO)
        parser.read(path)
    return parser


def _resolve_out(path: str | None, out_dir: str | None) -> str | None:
    if path is None:
        return None
    p = Path(path)
    if out_dir and not p.is_absolute():
        return str(Path(out_dir) / p)
    return str(p)


def _backbone_payload(args, config) -> dict:
    payload = _collect(args, config, "backbone", _BACKBONE_FIELDS)
    return payload


def _post(args, path: str, payload: dict) -> int:
    async def go():
        if args.server:
            async with httpx.AsyncClient(base_url=args.server, timeout=None) as client:
                return await client.post(path, json=payload)
        from .service import create_app
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport, base_url="http://mstl",
                                     timeout=None) as client:
            return await client.post(path, json=payload)

    try:
        resp = asyncio.run(go())
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service: {exc}", file=sys.stderr)
        return EXIT_IO

    if resp.status_code == 200:
        body = resp.json()
        if path == "/leep":
            print(body["leep"])
        else:
            print(json.dumps(body, indent=2, sort_keys=True))
        return EXIT_OK

    try:
        detail = resp.json().get("detail")
    except ValueError:
        detail = None
    if isinstance(detail, dict) and "code" in detail:
        print(f"error ({detail['code']}): {detail['message']}", file=sys.stderr)
        return _EXIT_BY_CODE.get(detail["code"], 1)
    print(f"error: HTTP {resp.status_code}: {detail}", file=sys.stderr)
    return EXIT_CONFIG if resp.status_code == 422 else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--out-dir", default=None,
                        help="base directory for relative output paths")
    common.add_argument("--server", default=None,
                        help="service URL (default: run in-process)")

    parser = argparse.ArgumentParser(prog="mstl",
                                     description="multi-stage transfer learning runner")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate-data", parents=[common],
                       help="write a synthetic dataset")
    p.add_argument("--kind", choices=["target", "medical", "natural"], default=None)
    p.add_argument("--n", type=str, default=None, help="number of images")
    p.add_argument("--image-size", type=str, default=None)
    p.add_argument("--noise-sigma", type=str, default=None)
    p.add_argument("--out", default=None, help="dataset directory")

    p = sub.add_parser("pretrain", parents=[common],
                       help="supervised pretraining stage (stl_n or stl_m)")
    p.add_argument("--stage", choices=["stl_n", "stl_m"], default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--out-checkpoint", default=None)
    p.add_argument("--init-checkpoint", default=None)
    _add_fields(p, _TRAIN_FIELDS)
    _add_fields(p, _BACKBONE_FIELDS)

    p = sub.add_parser("ssl-pretrain", parents=[common],
                       help="self-supervised pretraining stage (sstl_m)")
    p.add_argument("--dataset", default=None)
    p.add_argument("--out-checkpoint", default=None)
    p.add_argument("--init-checkpoint", default=None)
    _add_fields(p, _TRAIN_FIELDS)
    _add_fields(p, _SSL_FIELDS)
    _add_fields(p, _BACKBONE_FIELDS)

    p = sub.add_parser("finetune", parents=[common],
                       help="finetune on the target dataset")
    p.add_argument("--dataset", default=None)
    p.add_argument("--out-checkpoint", default=None)
    p.add_argument("--init-checkpoint", default=None,
                   help="omit to train from scratch")
    _add_fields(p, _TRAIN_FIELDS)
    _add_fields(p, _BACKBONE_FIELDS)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--split", choices=["train", "val", "test"], default=None)
    p.add_argument("--out-json", default=None)

    p = sub.add_parser("leep", parents=[common],
                       help="transferability score from a csv or a checkpoint")
    p.add_argument("--csv", default=None, help="dummy-distribution csv (z0..zK,label)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--split", choices=["train", "val", "test"], default=None)
    p.add_argument("--out-json", default=None)

    p = sub.add_parser("report", parents=[common],
                       help="transfer-gain report from two eval reports")
    p.add_argument("--no-pretrain-json", default=None)
    p.add_argument("--pretrained-json", default=None)
    p.add_argument("--out-json", default=None)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _require(payload: dict, keys, verb: str) -> int | None:
    missing = [k for k in keys if not payload.get(k)]
    if missing:
        print(f"error: {verb} requires {', '.join('--' + m.replace('_', '-') for m in missing)}",
              file=sys.stderr)
        return EXIT_CONFIG
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = _load_config(args.config)
    section = args.verb

    if args.verb == "serve":
        import uvicorn

        from .service import create_app
        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    if args.verb == "generate-data":
        fields = [("kind", str, ""), ("n", int, ""), ("image-size", int, ""),
                  ("noise-sigma", float, ""), ("out", str, "")]
        payload = _collect(args, config, section, fields)
        out = payload.pop("out", None)
        kind = payload.get("kind", "target")
        out = _resolve_out(out, args.out_dir) or (
            str(Path(args.out_dir) / kind) if args.out_dir else None)
        if (err := _require({"out": out, "n": payload.get("n")},
                            ("out", "n"), args.verb)) is not None:
            return err
        payload["out_dir"] = out
        if args.seed is not None:
            payload["seed"] = args.seed
        return _post(args, "/data/generate", payload)

    if args.verb in ("pretrain", "ssl-pretrain", "finetune"):
        fields = list(_TRAIN_FIELDS)
        if args.verb == "ssl-pretrain":
            fields += _SSL_FIELDS
        payload = _collect(args, config, section, fields)
        for key in ("stage", "dataset", "out_checkpoint", "init_checkpoint"):
            value = getattr(args, key, None)
            if value is None and config.has_option(section, key):
                value = config.get(section, key)
            if value is not None:
                payload[key] = value
        payload["out_checkpoint"] = _resolve_out(payload.get("out_checkpoint"), args.out_dir)
        if args.seed is not None:
            payload["seed"] = args.seed
        backbone = _backbone_payload(args, config)
        if backbone:
            payload["backbone"] = backbone
        required = ("dataset", "out_checkpoint") if args.verb != "pretrain" else (
            "stage", "dataset", "out_checkpoint")
        if (err := _require(payload, required, args.verb)) is not None:
            return err
        route = {"pretrain": "/train/supervised", "ssl-pretrain": "/train/ssl",
                 "finetune": "/train/finetune"}[args.verb]
        return _post(args, route, payload)

    if args.verb == "evaluate":
        fields = [("checkpoint", str, ""), ("dataset", str, ""),
                  ("split", str, ""), ("out-json", str, "")]
        payload = _collect(args, config, section, fields)
        payload["out_json"] = _resolve_out(payload.get("out_json"), args.out_dir)
        if payload["out_json"] is None:
            payload.pop("out_json")
        if (err := _require(payload, ("checkpoint", "dataset"), args.verb)) is not None:
            return err
        return _post(args, "/evaluate", payload)

    if args.verb == "leep":
        fields = [("csv", str, ""), ("checkpoint", str, ""), ("dataset", str, ""),
                  ("split", str, ""), ("out-json", str, "")]
        payload = _collect(args, config, section, fields)
        payload["out_json"] = _resolve_out(payload.get("out_json"), args.out_dir)
        if payload["out_json"] is None:
            payload.pop("out_json")
        if not payload.get("csv") and not (payload.get("checkpoint") and payload.get("dataset")):
            print("error: leep requires --csv or --checkpoint with --dataset",
                  file=sys.stderr)
            return EXIT_CONFIG
        return _post(args, "/leep", payload)

    if args.verb == "report":
        fields = [("no-pretrain-json", str, ""), ("pretrained-json", str, ""),
                  ("out-json", str, "")]
        payload = _collect(args, config, section, fields)
        if (err := _require(payload, ("no_pretrain_json", "pretrained_json"),
                            args.verb)) is not None:
            return err
        body = {
            "no_pretrain": payload["no_pretrain_json"],
            "pretrained": payload["pretrained_json"],
        }
        out_json = _resolve_out(payload.get("out_json"), args.out_dir)
        if out_json:
            body["out_json"] = out_json
        return _post(args, "/report", body)

    raise AssertionError(f"unhandled verb {args.verb}")


if __name__ == "__main__":
    sys.exit(main())
