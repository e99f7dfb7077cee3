"""Thin-client CLI for the wisteria service.

Every subcommand sends one request to the service and writes the returned
files to disk. With no ``--server`` the request runs against an in-process
instance of the app, so the CLI works standalone; point ``--server`` (or
the WISTERIA_SERVER environment variable) at a running ``wisteria serve``
to execute remotely instead.

Exit codes: 0 success, 1 configuration or input error, 2 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, WisteriaError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class ServiceClient:
    """HTTP client for the service; in-process when no server URL is given."""

    def __init__(self, server: str | None = None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=None)
        else:
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DeprecationWarning)
                from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app())

    def post(self, path: str, payload: dict) -> dict:
        response = self._client.post(path, json=payload)
        if response.status_code >= 400:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            if response.status_code in (400, 422):
                raise ConfigError(f"{path}: {detail}")
            raise WisteriaError(f"{path}: {detail}")
        return response.json()


def _read_config(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    return data


def _file_entry(path: Path, binary: bool) -> dict:
    try:
        if binary:
            return {"kind": "binary", "data": base64.b64encode(path.read_bytes()).decode("ascii")}
        return {"kind": "text", "data": path.read_text(encoding="utf-8")}
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _data_dir_files(data_dir: str) -> dict:
    base = Path(data_dir)
    return {
        "dataset.jsonl": _file_entry(base / "dataset.jsonl", binary=False),
        "views.wstv": _file_entry(base / "views.wstv", binary=True),
        "views.json": _file_entry(base / "views.json", binary=False),
        "graph.json": _file_entry(base / "graph.json", binary=False),
    }


def _write_files(out_dir: str, files: dict) -> None:
    out = Path(out_dir)
    for rel_path, entry in files.items():
        target = out / rel_path
        target.parent.mkdir(parents=True, exist_ok=True)
        if entry["kind"] == "binary":
            target.write_bytes(base64.b64decode(entry["data"]))
        else:
            target.write_text(entry["data"], encoding="utf-8", newline="\n")


def _cmd_generate(client: ServiceClient, args) -> int:
    config = _read_config(args.config)
    result = client.post("/generate", {"config": config})
    _write_files(args.out, result["files"])
    print(f"wrote {len(result['files'])} files to {args.out}")
    return EXIT_OK


def _cmd_train(client: ServiceClient, args) -> int:
    config = _read_config(args.config)
    payload = {"config": config, "files": _data_dir_files(args.data)}
    result = client.post("/train", payload)
    _write_files(args.out, result["files"])
    print(f"wrote {len(result['files'])} files to {args.out}")
    return EXIT_OK


def _cmd_eval(client: ServiceClient, args) -> int:
    base = Path(args.data)
    payload = {
        "files": {
            "checkpoint.ckpt": _file_entry(Path(args.checkpoint), binary=True),
            "dataset.jsonl": _file_entry(base / "dataset.jsonl", binary=False),
            "graph.json": _file_entry(base / "graph.json", binary=False),
        }
    }
    result = client.post("/eval", payload)
    report_text = result["files"]["report.json"]["data"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_text, encoding="utf-8", newline="\n")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_sweep(client: ServiceClient, args) -> int:
    config = _read_config(args.config)
    result = client.post("/sweep", {"config": config, "protocol": args.protocol})
    _write_files(args.out, result["files"])
    print(f"wrote {len(result['files'])} files to {args.out}")
    return EXIT_OK


def _cmd_report(client: ServiceClient, args) -> int:
    aggregate = Path(args.in_dir) / "aggregate.json"
    payload = {"files": {"aggregate.json": _file_entry(aggregate, binary=False)}}
    result = client.post("/report", payload)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(result["files"]["summary.md"]["data"], encoding="utf-8", newline="\n")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("wisteria.service:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wisteria", description=__doc__)
    parser.add_argument(
        "--server",
        default=os.environ.get("WISTERIA_SERVER"),
        help="service URL; default runs the service in-process",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write dataset, views, and graph")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a generated data dir")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a data dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="run a protocol sweep")
    p.add_argument("--config", required=True)
    p.add_argument(
        "--protocol",
        required=True,
        choices=["noise_sweep", "transfer", "ablation", "k_scaling"],
    )
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="render a sweep directory as markdown")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="run the service with uvicorn")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8570)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            return _cmd_serve(args)
        client = ServiceClient(args.server)
        handler = {
            "generate": _cmd_generate,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "sweep": _cmd_sweep,
            "report": _cmd_report,
        }[args.command]
        return handler(client, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WisteriaError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
