"""Retained MCMC draws and their on-disk format.

File layout (all integers little-endian)::

    8 bytes   magic  b"GDMNSMP\\x00"
    uint32    format version (currently 1)
    uint64    header length in bytes
    header    UTF-8 JSON: {"arrays": [{"name", "shape", "kind", "offset"}],
                           "meta": {...}, "adaptation": [...]}
    payload   each array as contiguous little-endian float64, at ``offset``
              bytes from the start of the payload

Arrays are indexed ``(chain, draw, ...)``. Integer arrays are stored as
float64 and restored as int64 (``kind == "int"``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["PosteriorSamples", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"GDMNSMP\x00"
FORMAT_VERSION = 1


@dataclass
class PosteriorSamples:
    draws: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    adaptation: list[dict] = field(default_factory=list)

    def __post_init__(self):
        shapes = {a.shape[:2] for a in self.draws.values()}
        if len(shapes) > 1:
            raise ValueError(f"draw arrays disagree on (chain, draw) dimensions: {sorted(shapes)}")
        # keep meta in its on-disk form so saved and in-memory copies compare equal
        self.meta = json.loads(json.dumps(self.meta, default=_json_default))
        self.adaptation = json.loads(json.dumps(self.adaptation, default=_json_default))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.draws[name]

    def __contains__(self, name: str) -> bool:
        return name in self.draws

    @property
    def n_chains(self) -> int:
        return next(iter(self.draws.values())).shape[0]

    @property
    def n_draws(self) -> int:
        return next(iter(self.draws.values())).shape[1]

    @property
    def family(self) -> str:
        return self.meta.get("family", "gdm")

    def flat(self, name: str) -> np.ndarray:
        """Draws pooled over chains, ``(chain * draw, ...)`` in chain-major order."""
        a = self.draws[name]
        return a.reshape((-1,) + a.shape[2:])

    # persistence ----------------------------------------------------------
    def save(self, path) -> None:
        entries = []
        offset = 0
        for name, arr in self.draws.items():
            kind = "int" if np.issubdtype(arr.dtype, np.integer) else "float"
            entries.append({"name": name, "shape": list(arr.shape), "kind": kind, "offset": offset})
            offset += int(np.prod(arr.shape)) * 8
        header = json.dumps(
            {"arrays": entries, "meta": self.meta, "adaptation": self.adaptation}, default=_json_default
        ).encode("utf-8")
        with Path(path).open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
            fh.write(header)
            for arr in self.draws.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> PosteriorSamples:
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not a samples file")
        version, hlen = struct.unpack("<IQ", raw[8:20])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported samples format version {version}")
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
        payload = memoryview(raw)[20 + hlen:]
        draws = {}
        for e in header["arrays"]:
            n = int(np.prod(e["shape"]))
            arr = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
            draws[e["name"]] = arr.astype(np.int64) if e["kind"] == "int" else arr.astype(np.float64)
        return cls(draws, header.get("meta", {}), header.get("adaptation", []))


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
