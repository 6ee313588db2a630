"""JSON-lines run reports."""

from __future__ import annotations

import hashlib
import json
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


def hardware_tag() -> str:
    return f"{platform.machine()}-{platform.processor() or 'cpu'}-{os.cpu_count()}cpu-torch{torch.get_num_threads()}t"


def digest_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_jsonable).encode()).hexdigest()[:16]


def dataset_digest(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.image).tobytes())
    return h.hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


@dataclass
class RunReport:
    run_id: str
    records: list[dict] = field(default_factory=list)

    def log(self, record: dict):
        self.records.append(record)

    def of_type(self, kind: str) -> list[dict]:
        return [r for r in self.records if r.get("type") == kind]

    @property
    def steps(self) -> list[dict]:
        return self.of_type("step")

    @property
    def summary(self) -> dict:
        found = self.of_type("summary")
        return found[-1] if found else {}

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"run_id": self.run_id, **r}, default=_jsonable) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunReport":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        run_id = records[0].get("run_id", "") if records else ""
        return cls(run_id, [{k: v for k, v in r.items() if k != "run_id"} for r in records])
