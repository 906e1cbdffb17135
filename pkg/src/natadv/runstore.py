"""Run directories, checksummed artifacts and an append-only manifest.

Layout under a store root::

    runs/manifest.ndjson
    runs/<id>/record.json
    runs/<id>/config.json
    runs/<id>/checkpoints/*
    runs/<id>/trajectories.ndjson
    runs/<id>/metrics.csv

A run becomes visible only when its manifest line is appended, which happens
after every artifact and the record itself are on disk, so a crash never
leaves a manifest entry pointing at incomplete files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from filelock import FileLock

KINDS = ("cooptimize", "train_robot", "attack", "scan", "robust_ft")
STATUSES = ("running", "done", "failed")
REQUIRED_ARTIFACTS = {
    "cooptimize": ("checkpoints/models.npz", "canonical.ndjson", "metrics.csv"),
    "train_robot": ("checkpoints/models.npz", "canonical.ndjson", "metrics.csv"),
    "attack": ("checkpoints/adversary.npz", "trajectories.ndjson", "metrics.csv"),
    "scan": ("scan_state.json",),
    "robust_ft": ("checkpoints/models.npz", "metrics.csv"),
}
_RESERVED = ("record.json", "config.json")


class RunStoreError(RuntimeError):
    pass


class NotFoundError(RunStoreError, KeyError):
    pass


class CorruptionError(RunStoreError):
    pass


class ValidationError(RunStoreError, ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def content_id(kind: str, config: Mapping, seed: int) -> str:
    """Deterministic run id: same kind, config and seed always map to the same id."""
    return sha256(canonical_json({"kind": kind, "config": config, "seed": int(seed)}).encode())[:16]


@dataclass
class RunRecord:
    run_id: str
    kind: str
    config: dict
    seed: int
    status: str = "running"
    summary: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256

    @classmethod
    def new(cls, kind: str, config: Mapping, seed: int) -> "RunRecord":
        if kind not in KINDS:
            raise ValidationError(f"unknown run kind {kind!r}")
        config = json.loads(canonical_json(config))
        return cls(run_id=content_id(kind, config, seed), kind=kind, config=config, seed=int(seed))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def _check_relpath(name: str) -> str:
    p = Path(name)
    if p.is_absolute() or ".." in p.parts or not p.parts:
        raise ValidationError(f"artifact path must be relative and inside the run: {name!r}")
    if name in _RESERVED:
        raise ValidationError(f"{name} is written by the store itself")
    return p.as_posix()


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunStore:
    """File-system run store; safe for concurrent writers in separate processes."""

    def __init__(self, root):
        self.root = Path(root)
        self.runs_dir = self.root / "runs"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.runs_dir / "manifest.ndjson"
        self._lock = FileLock(str(self.manifest_path) + ".lock")

    # -- manifest ---------------------------------------------------------

    def manifest(self) -> list[dict]:
        if not self.manifest_path.exists():
            return []
        out = []
        for line in self.manifest_path.read_text().splitlines():
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    # a torn trailing line from a crashed append is ignored
                    continue
        return out

    def latest(self) -> dict[str, dict]:
        """Most recent manifest entry per run id."""
        out: dict[str, dict] = {}
        for entry in self.manifest():
            out[entry["run_id"]] = entry
        return out

    def status(self, run_id: str) -> str | None:
        entry = self.latest().get(run_id)
        return None if entry is None else entry["status"]

    def _append(self, entry: dict) -> None:
        line = (canonical_json(entry) + "\n").encode()
        fd = os.open(self.manifest_path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, line)
            os.fsync(fd)
        finally:
            os.close(fd)

    # -- writing ----------------------------------------------------------

    def run_dir(self, run_id: str) -> Path:
        return self.runs_dir / run_id

    def begin(self, record: RunRecord) -> RunRecord:
        """Register a run as ``running``; returns the record (idempotent for a running run)."""
        record.status = "running"
        with self._lock:
            current = self.status(record.run_id)
            if current in ("done", "failed"):
                raise ValidationError(f"run {record.run_id} already finished with status {current}")
            if current == "running":
                return record
            d = self.run_dir(record.run_id)
            _atomic_write(d / "config.json", (json.dumps(record.config, sort_keys=True, indent=2) + "\n").encode())
            data = record.to_json().encode()
            _atomic_write(d / "record.json", data)
            self._append(self._entry(record, data))
        return record

    def persist(self, record: RunRecord, artifacts: Mapping[str, bytes] | None = None) -> str:
        """Write artifacts and the record atomically, then append to the manifest."""
        if record.kind not in KINDS:
            raise ValidationError(f"unknown run kind {record.kind!r}")
        if record.status not in ("done", "failed"):
            raise ValidationError("persist finalises a run; status must be done or failed")
        artifacts = {_check_relpath(k): bytes(v) for k, v in (artifacts or {}).items()}
        if record.status == "done":
            missing = [a for a in REQUIRED_ARTIFACTS[record.kind] if a not in artifacts]
            if missing:
                raise ValidationError(f"{record.kind} run is missing artifacts: {missing}")
        with self._lock:
            current = self.status(record.run_id)
            if current in ("done", "failed"):
                raise ValidationError(f"run {record.run_id} already finished with status {current}")
            d = self.run_dir(record.run_id)
            record.artifacts = {}
            for name in sorted(artifacts):
                _atomic_write(d / name, artifacts[name])
                record.artifacts[name] = sha256(artifacts[name])
            _atomic_write(d / "config.json", (json.dumps(record.config, sort_keys=True, indent=2) + "\n").encode())
            data = record.to_json().encode()
            _atomic_write(d / "record.json", data)
            self._append(self._entry(record, data))
        return record.run_id

    @staticmethod
    def _entry(record: RunRecord, record_bytes: bytes) -> dict:
        return {
            "run_id": record.run_id,
            "kind": record.kind,
            "seed": record.seed,
            "status": record.status,
            "record_sha256": sha256(record_bytes),
        }

    # -- reading ----------------------------------------------------------

    def load(self, run_id: str, verify: bool = True) -> RunRecord:
        entry = self.latest().get(run_id)
        if entry is None:
            raise NotFoundError(f"no run {run_id!r} in {self.manifest_path}")
        path = self.run_dir(run_id) / "record.json"
        try:
            data = path.read_bytes()
        except FileNotFoundError as exc:
            raise CorruptionError(f"run {run_id}: record.json missing") from exc
        if sha256(data) != entry["record_sha256"]:
            raise CorruptionError(f"run {run_id}: record checksum mismatch")
        record = RunRecord.from_json(data.decode())
        if verify:
            for name in record.artifacts:
                self.read_artifact(record, name)
        return record

    def read_artifact(self, record: RunRecord | str, name: str) -> bytes:
        if isinstance(record, str):
            record = self.load(record, verify=False)
        if name not in record.artifacts:
            raise NotFoundError(f"run {record.run_id} has no artifact {name!r}")
        try:
            data = (self.run_dir(record.run_id) / name).read_bytes()
        except FileNotFoundError as exc:
            raise CorruptionError(f"run {record.run_id}: artifact {name} missing") from exc
        if sha256(data) != record.artifacts[name]:
            raise CorruptionError(f"run {record.run_id}: checksum mismatch in {name}")
        return data

    def artifact_path(self, run_id: str, name: str) -> Path:
        return self.run_dir(run_id) / _check_relpath(name)

    def find(self, kind: str | None = None, status: str | None = None) -> list[dict]:
        return [e for e in self.latest().values()
                if (kind is None or e["kind"] == kind) and (status is None or e["status"] == status)]


# ----------------------------------------------------------------------
# Artifact encoders
# ----------------------------------------------------------------------


def metrics_csv(rows: Iterable[Mapping]) -> bytes:
    """Per-iteration metrics as CSV; columns in first-seen order, floats via repr."""
    rows = list(rows)
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "") for c in cols])
    return buf.getvalue().encode()


def read_metrics_csv(data: bytes) -> list[dict]:
    return list(csv.DictReader(io.StringIO(data.decode())))


def trajectories_ndjson(trajs) -> bytes:
    return "".join(canonical_json(t.to_record()) + "\n" for t in trajs).encode()


def read_trajectories(data: bytes):
    from .env import Trajectory

    return [Trajectory.from_record(json.loads(line)) for line in data.decode().splitlines() if line.strip()]
