"""Small file helpers shared by the pipeline stages."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def header_lines(chash: str, seed) -> tuple:
    return (f"config_hash={chash}", f"seed={seed}")


def dump_json(obj, path, comments=()) -> None:
    """JSON preceded by '#' comment lines (stripped again by ``load_json``)."""
    text = "".join(f"# {c}\n" for c in comments) + json.dumps(obj, indent=1, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_json(path):
    text = Path(path).read_text(encoding="utf-8")
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
    return json.loads(body)
