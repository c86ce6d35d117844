#!/usr/bin/env python3
"""Regenerate the bundled kitchen replay fixture (frames, clips, sidecars).

Run from the repository root: python scripts/make_kitchen_fixture.py
"""

from __future__ import annotations

import io
import json
import math
import wave
from pathlib import Path

from PIL import Image

ROOT = Path(__file__).resolve().parent.parent / "fixtures" / "kitchen"

FRAMES = [
    ("hallway_01", (188, 172, 136),
     "A hallway with a coat rack and a pair of shoes by the door."),
    ("kitchen_01", (140, 180, 200),
     "A kitchen counter with a phone beside the sink."),
    ("living_01", (120, 150, 110),
     "A living room with a sofa and a bookshelf near the window."),
    ("table_01", (200, 140, 120),
     "A person sitting at the dining table holding a red mug."),
]

UTTERANCES = [
    ("describe", 440, "Describe what you see."),
    ("locate_phone", 550, "Where did I leave my phone?"),
    ("remember_mary", 660, "Remember this person as Mary."),
]


def make_png(color: tuple[int, int, int]) -> bytes:
    image = Image.new("RGB", (48, 48), color)
    # A diagonal stripe so thumbnails are distinguishable at a glance.
    for i in range(48):
        image.putpixel((i, i), (255, 255, 255))
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return buffer.getvalue()


def make_tone_wav(frequency_hz: int, duration_ms: int = 400, rate: int = 16000) -> bytes:
    frames = rate * duration_ms // 1000
    samples = bytearray()
    for n in range(frames):
        value = int(12000 * math.sin(2 * math.pi * frequency_hz * n / rate))
        samples += value.to_bytes(2, "little", signed=True)
    buffer = io.BytesIO()
    with wave.open(buffer, "wb") as writer:
        writer.setnchannels(1)
        writer.setsampwidth(2)
        writer.setframerate(rate)
        writer.writeframes(bytes(samples))
    return buffer.getvalue()


def main() -> None:
    frames_dir = ROOT / "frames"
    utterances_dir = ROOT / "utterances"
    frames_dir.mkdir(parents=True, exist_ok=True)
    utterances_dir.mkdir(parents=True, exist_ok=True)

    events = []
    for index, (name, color, description) in enumerate(FRAMES):
        (frames_dir / f"{name}.png").write_bytes(make_png(color))
        (frames_dir / f"{name}.desc.txt").write_text(description + "\n", encoding="utf-8")
        events.append({"at_ms": index * 30000, "kind": "frame", "file": f"frames/{name}.png"})

    base = (len(FRAMES) - 1) * 30000 + 5000
    for index, (name, frequency, transcript) in enumerate(UTTERANCES):
        (utterances_dir / f"{name}.wav").write_bytes(make_tone_wav(frequency))
        (utterances_dir / f"{name}.txt").write_text(transcript + "\n", encoding="utf-8")
        events.append(
            {"at_ms": base + index * 5000, "kind": "utterance", "file": f"utterances/{name}.wav"}
        )

    manifest = {"name": "kitchen", "events": events}
    (ROOT / "scenario.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    print(f"wrote fixture with {len(events)} events under {ROOT}")


if __name__ == "__main__":
    main()
