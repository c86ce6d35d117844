"""Command-line entry points: serve, replay, query, store inspect."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import socket
import sys
import threading
import time
from pathlib import Path

import requests

from .bus import TOPIC_ANSWER_TEXT
from .config import ConfigError, ServiceConfig, load_config
from .gateway import ScenarioError, load_scenario, scenario_corpus
from .service import Pipeline, ServiceError, serve
from .store import MemoryStore


def _load_config_arg(path: str | None) -> ServiceConfig:
    if path is None:
        return ServiceConfig()
    return load_config(path)


def _parse_speed(raw: str) -> float | str:
    if raw == "max":
        return "max"
    try:
        value = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"speed must be a positive number or 'max', got {raw!r}")
    if value <= 0:
        raise argparse.ArgumentTypeError(f"speed must be > 0, got {value}")
    return value


def _cmd_serve(args: argparse.Namespace) -> int:
    config = _load_config_arg(args.config)
    handle = serve(config)
    if args.corpus:
        for corpus_dir in args.corpus:
            scenario = load_scenario(corpus_dir)
            descriptions, transcripts = scenario_corpus(scenario)
            handle.pipeline.adapters.register_corpus(descriptions, transcripts)
            print(f"registered corpus sidecars from {corpus_dir}")
    print(f"serving http on :{handle.http_port}, device gateway on :{handle.gateway_port}")
    print(f"data dir: {config.data_dir.resolve()}  (Ctrl-C to stop)")
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()
    print("shutting down...")
    handle.stop()
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    config = _load_config_arg(args.config)
    scenario = load_scenario(args.scenario)
    speed = args.speed
    if args.connect:
        return _replay_over_tcp(scenario, speed, args.connect)
    if args.data_dir:
        config.data_dir = Path(args.data_dir)
    pipeline = Pipeline(config)
    pipeline.start_workers()
    answers = pipeline.bus.subscribe(TOPIC_ANSWER_TEXT, buffer=256)
    report = pipeline.replay(scenario, speed=speed)
    pipeline.stop()
    print(f"replayed '{scenario.name}': {report.frames} frames, {report.utterances} utterances")
    print(f"store now holds {len(pipeline.store)} observation(s) in {config.data_dir}")
    while True:
        item = answers.get(timeout=0.1)
        if item is None:
            break
        _, envelope = item
        print(f"  answer: {envelope.text()}")
    return 0


def _replay_over_tcp(scenario, speed, target: str) -> int:
    from .bus import EnvelopeFactory, Kind, encode_envelope
    from .gateway import _normalize_speed

    host, _, port = target.rpartition(":")
    try:
        address = (host or "127.0.0.1", int(port))
    except ValueError:
        print(f"--connect expects host:port, got {target!r}", file=sys.stderr)
        return 2
    rate = _normalize_speed(speed)
    factory = EnvelopeFactory()
    frames = utterances = 0
    with socket.create_connection(address, timeout=10) as conn:
        start = time.monotonic()
        for event in scenario.events:
            if rate != float("inf"):
                delay = start + (event.at_ms / 1000.0) / rate - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            path = scenario.root / event.file
            payload = path.read_bytes()
            now_ms = int(time.time() * 1000)
            if event.kind == "frame":
                kind = Kind.IMAGE
                frames += 1
            elif path.suffix == ".txt":
                kind = Kind.TEXT
                payload = payload.decode("utf-8").strip().encode("utf-8")
                utterances += 1
            else:
                kind = Kind.AUDIO
                utterances += 1
            conn.sendall(encode_envelope(factory.make(kind, payload, now_ms)))
    print(f"streamed '{scenario.name}' to {target}: {frames} frames, {utterances} utterances")
    return 0


def _cmd_query(args: argparse.Namespace) -> int:
    url = args.url.rstrip("/") + "/api/query"
    response = requests.post(
        url, json={"session_id": args.session, "text": args.text}, timeout=30
    )
    if response.status_code != 200:
        print(f"error {response.status_code}: {response.text}", file=sys.stderr)
        return 1
    payload = response.json()
    print(f"route:      {payload['route']}")
    print(f"answer:     {payload['answer_text']}")
    if payload.get("retrieved_id") is not None:
        similarity = payload.get("similarity")
        extra = f" (similarity {similarity:.3f})" if similarity is not None else ""
        print(f"retrieved:  observation {payload['retrieved_id']}{extra}")
    print(f"llm rounds: {payload['llm_rounds']}")
    if args.verbose:
        print(json.dumps(payload, indent=2, ensure_ascii=False))
    return 0


def _cmd_store_inspect(args: argparse.Namespace) -> int:
    store = MemoryStore.load(args.data_dir, dim=args.dim)
    print(f"{len(store)} observation(s) in {args.data_dir}")
    for observation in reversed(store.recent()):
        flags = []
        if observation.image_ref:
            flags.append("image")
        if observation.pending:
            flags.append("pending")
        suffix = f" [{','.join(flags)}]" if flags else ""
        print(f"  #{observation.id} @{observation.timestamp_ms}{suffix}: {observation.description}")
        for annotation in observation.annotations:
            print(f"      + {annotation}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seesay",
        description="Assistive visual-memory pipeline: ingest frames, remember them, answer questions.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    serve_p = sub.add_parser("serve", help="run the full service")
    serve_p.add_argument("--config", help="YAML config path (defaults used when omitted)")
    serve_p.add_argument(
        "--corpus", action="append",
        help="scenario directory whose sidecars seed the mock adapters (repeatable)",
    )
    serve_p.set_defaults(func=_cmd_serve)

    replay_p = sub.add_parser("replay", help="drive a replay scenario")
    replay_p.add_argument("--scenario", required=True, help="scenario directory")
    replay_p.add_argument("--speed", type=_parse_speed, default="max",
                          help="playback speed multiplier or 'max' (default)")
    replay_p.add_argument("--config", help="YAML config path")
    replay_p.add_argument("--data-dir", help="override the config's data_dir")
    replay_p.add_argument("--connect", metavar="HOST:PORT",
                          help="stream to a running service's device gateway instead")
    replay_p.set_defaults(func=_cmd_replay)

    query_p = sub.add_parser("query", help="one-shot query against a running service")
    query_p.add_argument("--text", required=True)
    query_p.add_argument("--url", default="http://127.0.0.1:8080")
    query_p.add_argument("--session", default="cli")
    query_p.set_defaults(func=_cmd_query)

    store_p = sub.add_parser("store", help="store utilities")
    store_sub = store_p.add_subparsers(dest="store_command", required=True)
    inspect_p = store_sub.add_parser("inspect", help="list persisted observations")
    inspect_p.add_argument("--data-dir", required=True)
    inspect_p.add_argument("--dim", type=int, default=256)
    inspect_p.set_defaults(func=_cmd_store_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, ServiceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
