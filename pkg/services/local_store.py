"""
local_store.py — every file the bench reads or writes.

Relative paths resolve under the data directory (BENCH_DATA_DIR, default
data/ next to the project, gitignored); absolute paths are used as given.

_replace_atomically() writes to a temporary file first, then replaces the
target (os.replace), so a crash mid-write cannot leave a half-written
report, table or checkpoint behind.

Formats
-------
checkpoint      little-endian binary, see services/model.py
records CSV     image_id,success,distortion,cost   (distortion empty on failure)
trajectory CSV  image_id,query_index,distortion
PPM dataset     a directory with labels.csv (filename,label) and P6 files
report JSON     {"schema_version", "payload", "payload_sha256", "timings"}
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from collections.abc import Iterable
from pathlib import Path

from config import REPORT_SCHEMA_VERSION
from services.imaging import PpmError, read_ppm
from services.metrics import AttackRecord
from services.model import CheckpointError, Classifier, LabeledImage, decode_checkpoint, encode_checkpoint

logger = logging.getLogger(__name__)

_DATA_DIR = Path(os.environ.get("BENCH_DATA_DIR") or Path(__file__).parent.parent / "data")

RECORD_COLUMNS = ("image_id", "success", "distortion", "cost")
TRAJECTORY_COLUMNS = ("image_id", "query_index", "distortion")
LABELS_FILE = "labels.csv"


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Internal helpers
# ---------------------------------------------------------------------------

def resolve(path: Path | str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _DATA_DIR / p


def _replace_atomically(path: Path, data: bytes) -> None:
    """Atomically write data to path via a temp file + os.replace."""
    dir_ = path.parent
    dir_.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dir_, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except Exception:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def canonical_json(data: object) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _load(path: Path, default: dict) -> dict:
    if path.exists():
        try:
            with open(path, encoding="utf-8") as f:
                return json.load(f)
        except (json.JSONDecodeError, OSError) as e:
            logger.warning("could not read %s: %s; using defaults", path, e)
    return copy.deepcopy(default)


def _save(path: Path, data: dict) -> None:
    _replace_atomically(path, (json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n").encode("utf-8"))


def _write_csv(path: Path, header: Iterable[str], rows: Iterable[Iterable[object]]) -> None:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _replace_atomically(path, buf.getvalue().encode("utf-8"))


def _read_csv(path: Path, header: tuple[str, ...]) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != header:
            raise DatasetError(f"{path}: expected columns {','.join(header)}, got {reader.fieldnames}")
        return list(reader)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path | str, m: Classifier) -> Path:
    target = resolve(path)
    _replace_atomically(target, encode_checkpoint(m))
    return target


def load_checkpoint(path: Path | str) -> Classifier:
    target = resolve(path)
    try:
        data = target.read_bytes()
    except OSError as e:
        raise CheckpointError(f"could not read checkpoint {target}: {e}") from e
    return decode_checkpoint(data)


# ---------------------------------------------------------------------------
# Record tables
# ---------------------------------------------------------------------------

def write_records(path: Path | str, records: Iterable[AttackRecord]) -> Path:
    """Floats are written with repr() so they read back bit-exactly."""
    target = resolve(path)
    rows = (
        (r.image_id, int(r.success), "" if r.distortion is None else repr(float(r.distortion)), r.cost)
        for r in records
    )
    _write_csv(target, RECORD_COLUMNS, rows)
    return target


def read_records(path: Path | str) -> list[AttackRecord]:
    target = resolve(path)
    records = []
    for line, row in enumerate(_read_csv(target, RECORD_COLUMNS), start=2):
        try:
            success = row["success"] == "1"
            distortion = float(row["distortion"]) if row["distortion"] else None
            records.append(AttackRecord(row["image_id"], success, distortion, int(row["cost"])))
        except (TypeError, ValueError) as e:
            raise DatasetError(f"{target}:{line}: {e}") from e
    return records


def write_trajectories(path: Path | str, trajectories: dict[str, list[tuple[int, float]]]) -> Path:
    target = resolve(path)
    rows = (
        (image_id, q, repr(float(d)))
        for image_id in sorted(trajectories)
        for q, d in trajectories[image_id]
    )
    _write_csv(target, TRAJECTORY_COLUMNS, rows)
    return target


def read_trajectories(path: Path | str) -> dict[str, list[tuple[int, float]]]:
    trajectories: dict[str, list[tuple[int, float]]] = {}
    target = resolve(path)
    for line, row in enumerate(_read_csv(target, TRAJECTORY_COLUMNS), start=2):
        try:
            point = (int(row["query_index"]), float(row["distortion"]))
        except (TypeError, ValueError) as e:
            raise DatasetError(f"{target}:{line}: {e}") from e
        trajectories.setdefault(row["image_id"], []).append(point)
    return trajectories


# ---------------------------------------------------------------------------
# PPM datasets
# ---------------------------------------------------------------------------

def load_ppm_dataset(directory: Path | str) -> list[LabeledImage]:
    """
    Reads labels.csv (filename,label) and the P6 files it names, in the
    order listed.  The image id is the file name without its extension.
    """
    root = resolve(directory)
    labels_path = root / LABELS_FILE
    if not labels_path.exists():
        raise DatasetError(f"{root} has no {LABELS_FILE}")
    try:
        rows = _read_csv(labels_path, ("filename", "label"))
    except (OSError, ValueError) as e:
        raise DatasetError(f"could not read {labels_path}: {e}") from e

    samples = []
    for row in rows:
        name = row["filename"]
        try:
            label = int(row["label"])
        except ValueError as e:
            raise DatasetError(f"{name}: label {row['label']!r} is not an integer") from e
        if label < 0:
            raise DatasetError(f"{name}: negative label {label}")
        try:
            image = read_ppm(root / name)
        except (OSError, PpmError) as e:
            raise DatasetError(f"{name}: {e}") from e
        samples.append(LabeledImage(image, label, Path(name).stem))
    return samples


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def payload_digest(payload: dict) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def save_report(path: Path | str, payload: dict, timings: dict[str, float]) -> Path:
    target = resolve(path)
    _save(target, {
        "schema_version": REPORT_SCHEMA_VERSION,
        "payload": payload,
        "payload_sha256": payload_digest(payload),
        "timings": timings,
    })
    return target


def load_report(path: Path | str) -> dict:
    """
    Returns the whole report document.  An unreadable file yields an empty
    document (with a warning) so plot-data can skip it; a schema mismatch
    or a payload that no longer matches its hash raises DatasetError.
    """
    target = resolve(path)
    doc = _load(target, {})
    if not doc:
        return doc
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise DatasetError(f"{target}: unsupported report schema {doc.get('schema_version')!r}")
    if payload_digest(doc["payload"]) != doc["payload_sha256"]:
        raise DatasetError(f"{target}: payload does not match its sha256")
    return doc


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------

def write_table(path: Path | str, header: tuple[str, ...], rows: Iterable[Iterable[object]]) -> Path:
    target = resolve(path)
    _write_csv(target, header, rows)
    return target


def read_table(path: Path | str, header: tuple[str, ...]) -> list[dict[str, str]]:
    return _read_csv(resolve(path), header)


def save_json(path: Path | str, data: dict) -> Path:
    target = resolve(path)
    _save(target, data)
    return target


def save_text(path: Path | str, text: str) -> Path:
    target = resolve(path)
    _replace_atomically(target, text.encode("utf-8"))
    return target
