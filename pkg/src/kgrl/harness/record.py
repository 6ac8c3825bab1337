"""Run records, CSV artifacts and the fingerprints used by the run cache."""

from __future__ import annotations

import csv
import hashlib
import json
import subprocess
from functools import lru_cache
from pathlib import Path

import jsonschema
import numpy as np

RUN_SCHEMA_PATH = Path(__file__).with_name("run.schema.json")
RUN_FORMAT = "kgrl-run"
RUN_VERSION = 1
PACKAGE_ROOT = Path(__file__).resolve().parents[1]

CURVE_HEADER = ("step", "source", "mean_return", "min_return", "success_rate", "episodes")
TRACE_FIXED = ("episode", "step", "action", "chosen", "events")
SWEEP_HEADER = ("scale", "mean_return", "min_return", "success_rate", "episodes")


class RecordError(ValueError):
    pass


@lru_cache(maxsize=None)
def _run_schema() -> dict:
    return json.loads(RUN_SCHEMA_PATH.read_text())


def validate_record(record: dict) -> None:
    try:
        jsonschema.validate(record, _run_schema())
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise RecordError(f"run record invalid at {path}: {exc.message}") from exc
    steps = [e["step"] for e in record["evals"]]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise RecordError("eval steps must be strictly increasing")


def write_record(path: Path, record: dict) -> None:
    validate_record(record)
    path.write_text(json.dumps(record, indent=2))


def read_record(path: Path) -> dict:
    record = json.loads(Path(path).read_text())
    validate_record(record)
    return record


def metrics(returns, successes) -> dict:
    returns = np.asarray(returns, dtype=np.float64)
    return {
        "mean_return": float(returns.mean()),
        "min_return": float(returns.min()),
        "success_rate": float(np.mean(successes)),
        "episodes": int(returns.size),
    }


def metric_view(record: dict) -> dict:
    """The parts of a record that must be identical across reruns of a config and seed."""
    keep = ("config_hash", "seed", "components", "evals", "steps_to_threshold", "total_env_steps", "final")
    return {k: record[k] for k in keep}


# -- fingerprints
@lru_cache(maxsize=None)
def code_hash() -> str:
    """Hash of the package sources; any code change invalidates cached runs."""
    h = hashlib.sha256()
    for p in sorted(PACKAGE_ROOT.rglob("*")):
        if p.suffix in (".py", ".json") and "__pycache__" not in p.parts and "configs" not in p.parts:
            h.update(str(p.relative_to(PACKAGE_ROOT)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes() if p.exists() else b"<missing>")
    return h.hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=PACKAGE_ROOT,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"
    return out.stdout.strip() or "unknown"


# -- CSV
def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header))
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def trace_header(components) -> list[str]:
    return list(TRACE_FIXED) + [f"raw_{c}" for c in components] + [f"w_{c}" for c in components]
