"""File-handshake protocol for models that run in a separate process.

The client drops ``req_{name}.p4dt`` and then ``req_{name}.json`` into a
watched directory (the JSON is written last and marks the request complete).
The external process answers with ``resp_{name}.p4dt``.  A ``DONE`` file ends
the session.  All files are written via temp file + rename.
"""

from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .tensorio import TensorFormatError, read_tensor, write_tensor

log = logging.getLogger(__name__)

ENV_DIR = "PANO4D_EXTERNAL_DIR"
DONE = "DONE"


class HandshakeTimeout(RuntimeError):
    pass


def _write_json(path: Path, obj: dict) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True))
    os.replace(tmp, path)


def resolve_directory(directory=None) -> Path:
    directory = directory or os.environ.get(ENV_DIR)
    if not directory:
        raise ValueError(f"no external-process directory given and ${ENV_DIR} is unset")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    return d


class FileHandshake:
    def __init__(self, directory=None, timeout: float = 60.0, retries: int = 2, poll: float = 0.005):
        self.directory = resolve_directory(directory)
        self.timeout = timeout
        self.retries = retries
        self.poll = poll

    def request(self, name: str, tensor: np.ndarray | None, meta: dict) -> np.ndarray:
        req_t = self.directory / f"req_{name}.p4dt"
        req_j = self.directory / f"req_{name}.json"
        resp = self.directory / f"resp_{name}.p4dt"
        for attempt in range(self.retries + 1):
            if tensor is not None:
                write_tensor(req_t, tensor)
            _write_json(req_j, dict(meta, name=name, attempt=attempt))
            deadline = time.monotonic() + self.timeout
            while time.monotonic() < deadline:
                if resp.exists():
                    try:
                        out = read_tensor(resp)
                    except TensorFormatError:
                        time.sleep(self.poll)
                        continue
                    resp.unlink()
                    return out
                time.sleep(self.poll)
            log.warning("request %s timed out (attempt %d)", name, attempt + 1)
        raise HandshakeTimeout(f"no response for {name} after {self.retries + 1} attempts")

    def close(self) -> None:
        (self.directory / DONE).touch()


def serve(directory, handler: Callable[[dict, np.ndarray | None], np.ndarray],
          poll: float = 0.005, idle_timeout: float = 120.0) -> int:
    """Answer requests until ``DONE`` appears; returns the number served.

    Reference server for external model wrappers and for tests.
    """
    d = Path(directory)
    served = 0
    seen: dict[str, int] = {}
    last = time.monotonic()
    while True:
        if (d / DONE).exists():
            return served
        for req in sorted(d.glob("req_*.json")):
            try:
                meta = json.loads(req.read_text())
            except (OSError, json.JSONDecodeError):
                continue
            name = meta["name"]
            if seen.get(name) == meta.get("attempt"):
                continue
            tpath = d / f"req_{name}.p4dt"
            tensor = read_tensor(tpath) if tpath.exists() else None
            write_tensor(d / f"resp_{name}.p4dt", handler(meta, tensor))
            seen[name] = meta.get("attempt")
            req.unlink()
            if tpath.exists():
                tpath.unlink()
            served += 1
            last = time.monotonic()
        if time.monotonic() - last > idle_timeout:
            raise HandshakeTimeout("server idle for too long")
        time.sleep(poll)
