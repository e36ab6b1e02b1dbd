"""Artifact files: version-stamped JSON documents, dataset CSV, manifests.

Every JSON document carries a "format" stamp "sgmoe/<kind>/v<major>"; the
loaders refuse stamps whose kind or major version they do not understand.
Floats are written with repr, so finite doubles survive a round trip
bit-for-bit. Dataset CSVs have no stamp: their header is their schema.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .dendrogram import Dendrogram
from .errors import InputError
from .estimation import FitResult
from .model import Dataset, MixingMeasure
from .selection import SelectionReport

import numpy as np

SUPPORTED_MAJOR = 1
TOOL_VERSION = f"v{__version__}"

_FORMAT_RE = re.compile(r"^sgmoe/([a-z_]+)/v(\d+)$")


def format_tag(kind: str) -> str:
    return f"sgmoe/{kind}/v{SUPPORTED_MAJOR}"


def _write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_stamped(path) -> tuple[str, dict]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "format" not in doc:
        raise InputError(f"{path} has no format stamp")
    m = _FORMAT_RE.match(str(doc["format"]))
    if m is None:
        raise InputError(f"{path}: unrecognized format stamp {doc['format']!r}")
    kind, major = m.group(1), int(m.group(2))
    if major != SUPPORTED_MAJOR:
        raise InputError(
            f"{path}: unsupported major version {major} "
            f"(this tool reads v{SUPPORTED_MAJOR})")
    return kind, doc


def _read_json(path, kind: str) -> dict:
    got_kind, doc = _read_stamped(path)
    if got_kind != kind:
        raise InputError(f"{path} holds a {got_kind!r} document, not {kind!r}")
    return doc


def save_stamped(kind: str, payload: dict, path) -> None:
    """Write an arbitrary payload dict under a format stamp."""
    _write_json({"format": format_tag(kind), **payload}, path)


def save_model(model: MixingMeasure, path) -> None:
    _write_json({"format": format_tag("model"), **model.to_dict()}, path)


def load_model(path) -> MixingMeasure:
    return MixingMeasure.from_dict(_read_json(path, "model"))


def save_fit(fit: FitResult, path) -> None:
    _write_json({"format": format_tag("fit"), **fit.to_dict()}, path)


def load_fit(path) -> FitResult:
    return FitResult.from_dict(_read_json(path, "fit"))


def load_model_or_fit(path) -> MixingMeasure:
    """Accept either a model document or a fit document holding one."""
    kind, doc = _read_stamped(path)
    if kind == "model":
        return MixingMeasure.from_dict(doc)
    if kind == "fit":
        return FitResult.from_dict(doc).model
    raise InputError(f"{path} holds a {kind!r} document, expected a model "
                     "or fit")


def save_dendrogram(dg: Dendrogram, path) -> None:
    _write_json({"format": format_tag("dendrogram"), **dg.to_dict()}, path)


def load_dendrogram(path) -> Dendrogram:
    return Dendrogram.from_dict(_read_json(path, "dendrogram"))


def save_report(report: SelectionReport, path) -> None:
    _write_json({"format": format_tag("selection"), **report.to_dict()}, path)


def load_report(path) -> SelectionReport:
    return SelectionReport.from_dict(_read_json(path, "selection"))


# ---------------------------------------------------------------------------
# dataset CSV

def dataset_header(dim: int) -> list[str]:
    return [f"x{i + 1}" for i in range(dim)] + ["y"]


def write_dataset_csv(data: Dataset, path) -> None:
    """Header x1..xD,y; values via repr (17 significant digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(dataset_header(data.dim))
        for i in range(data.n):
            w.writerow([repr(float(v)) for v in data.xs[i]]
                       + [repr(float(data.ys[i]))])


def load_dataset_csv(path, y_last: bool = False) -> Dataset:
    """Read a dataset table; the response is the final column.

    By default the header must be exactly x1..xD,y. With y_last=True any
    column names are accepted (external tables), the last column is taken
    as the response. Errors carry 1-based file line numbers; the header
    is line 1.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise InputError(f"{path} is empty")
    header = rows[0]
    if len(header) < 2:
        raise InputError(f"{path} line 1: need at least one covariate and y")
    dim = len(header) - 1
    if not y_last and header != dataset_header(dim):
        raise InputError(
            f"{path} line 1: expected header {','.join(dataset_header(dim))}")
    if len(rows) == 1:
        raise InputError(f"{path} has a header but no data rows")
    xs = np.empty((len(rows) - 1, dim))
    ys = np.empty(len(rows) - 1)
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != dim + 1:
            raise InputError(
                f"{path} line {line}: expected {dim + 1} columns, "
                f"got {len(row)}")
        try:
            vals = [float(tok) for tok in row]
        except ValueError as exc:
            raise InputError(f"{path} line {line}: {exc}") from exc
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"{path} line {line}: non-finite value")
        xs[i] = vals[:dim]
        ys[i] = vals[dim]
    return Dataset(xs=xs, ys=ys)


# ---------------------------------------------------------------------------
# digests and manifests

def fnv1a64(data: bytes) -> str:
    """64-bit FNV-1a hash as 16 hex digits."""
    h = 0xcbf29ce484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001b3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def file_digest(path) -> str:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    return fnv1a64(path.read_bytes())


@dataclass(frozen=True)
class RunManifest:
    """Provenance record written next to every file-producing CLI run."""

    command: str
    config: dict
    seed: int | None
    version: str
    started: str
    finished: str
    inputs: dict           # file name -> fnv1a64 digest
    outputs: dict
    argv: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
            "inputs": dict(self.inputs),
            "outputs": dict(self.outputs),
            "argv": list(self.argv),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        try:
            return cls(command=str(d["command"]), config=dict(d["config"]),
                       seed=None if d["seed"] is None else int(d["seed"]),
                       version=str(d["version"]), started=str(d["started"]),
                       finished=str(d["finished"]), inputs=dict(d["inputs"]),
                       outputs=dict(d["outputs"]),
                       argv=tuple(str(a) for a in d["argv"]))
        except KeyError as exc:
            raise InputError(f"manifest missing field {exc}") from exc


def save_manifest(manifest: RunManifest, path) -> None:
    _write_json({"format": format_tag("manifest"), **manifest.to_dict()},
                path)


def load_manifest(path) -> RunManifest:
    return RunManifest.from_dict(_read_json(path, "manifest"))
