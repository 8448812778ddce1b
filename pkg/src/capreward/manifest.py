"""Run manifests: a reproducibility record written next to every CLI output."""

from __future__ import annotations

import hashlib
import json
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema

from . import __version__


def _load_schema() -> dict:
    text = resources.files("capreward.schemas").joinpath(
        "run_manifest.schema.json"
    ).read_text(encoding="utf-8")
    return json.loads(text)


_SCHEMA = _load_schema()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class ManifestWriter:
    """Collects run metadata and writes a schema-validated manifest."""

    def __init__(self, config_snapshot: dict, seeds: dict[str, int]):
        self.started = time.monotonic()
        self.config_snapshot = config_snapshot
        self.seeds = seeds
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def add_output(self, path: str | Path) -> None:
        self.outputs[str(path)] = file_digest(path)

    def write(self, path: str | Path, backends=(), cache=None) -> dict:
        caches = {id(cache): cache} if cache is not None else {
            id(b.cache): b.cache for b in backends
        }
        hits = sum(c.stats()["hits"] for c in caches.values())
        misses = sum(c.stats()["misses"] for c in caches.values())
        manifest = {
            "command_line": list(sys.argv),
            "config_snapshot": self.config_snapshot,
            "engine_version": __version__,
            "seeds": self.seeds,
            "input_digests": self.inputs,
            "output_digests": self.outputs,
            "wall_time_s": time.monotonic() - self.started,
            "backend_calls": sum(b.calls for b in backends),
            "cache_hits": hits,
            "cache_misses": misses,
        }
        jsonschema.validate(manifest, _SCHEMA)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return manifest
