"""On-disk formats: field stacks, label tables and skill tables.

A field stack is three files sharing a stem:

``<stem>.json``
    UTF-8 manifest (``schema_version`` 1) with variables, member, year
    range, dims, the lat/lon axes and the names of the two companions.
``<stem>.f32``
    raw little-endian float32 values, row-major (V, T, H, W).
``<stem>.mask``
    one byte (0/1) per cell: H*W bytes when every variable shares the mask,
    V*H*W bytes (variable-major) when they differ.

Nothing time-dependent is written, so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from amvpred.errors import FormatError, IoError, ShapeError
from amvpred.grid import FieldStack, Grid

SCHEMA_VERSION = 1
DTYPE = "f32le"
LAYOUT = "V,T,H,W row-major"
CLASS_NAMES = ("negative", "neutral", "positive", "overall")
SKILL_HEADER = ["model", "lead", "class", "repetition", "accuracy", "n_test"]
LABEL_HEADER = ["member", "year", "index", "label"]


def _manifest_path(path, member):
    path = Path(path)
    if path.suffix == ".json":
        return path
    return path / f"member_{member}.json"


def write_stack(stack, path):
    """Write ``stack`` as manifest + binary + mask and return the manifest path.

    ``path`` is either the manifest file name or a directory, in which case
    the stem ``member_<member>`` is used.
    """
    if len(stack.variables) < 1:
        raise FormatError("stack has no variables")
    data = np.asarray(stack.data, dtype=np.float64)
    valid = np.broadcast_to(stack.mask[:, None], data.shape)
    if not np.all(np.isfinite(data[valid])):
        raise FormatError(f"member {stack.member}: non-finite value at a valid cell")
    payload = np.where(valid, data, 0.0).astype("<f4")

    manifest_path = _manifest_path(path, stack.member)
    stem = manifest_path.with_suffix("")
    data_path = stem.with_suffix(".f32")
    mask_path = stem.with_suffix(".mask")
    shared = all(np.array_equal(m, stack.mask[0]) for m in stack.mask[1:])
    mask_bytes = (stack.mask[0] if shared else stack.mask).astype(np.uint8).tobytes()
    n_var, n_time, n_lat, n_lon = stack.shape
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "variables": [{"name": v, "units": stack.units.get(v, "")} for v in stack.variables],
        "member": stack.member,
        "years": [int(stack.years[0]), int(stack.years[-1])],
        "dims": {"V": n_var, "T": n_time, "H": n_lat, "W": n_lon},
        "lat": [float(x) for x in stack.grid.lats],
        "lon": [float(x) for x in stack.grid.lons],
        "dtype": DTYPE,
        "layout": LAYOUT,
        "data_file": data_path.name,
        "mask_file": mask_path.name,
    }
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        data_path.write_bytes(payload.tobytes(order="C"))
        mask_path.write_bytes(mask_bytes)
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write stack to {manifest_path}: {exc}") from exc
    return manifest_path


def _require(manifest, key):
    try:
        return manifest[key]
    except KeyError:
        raise FormatError(f"manifest lacks {key!r}") from None


def read_stack(manifest_path):
    """Inverse of :func:`write_stack`; values come back as float32."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc

    if _require(manifest, "schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {manifest['schema_version']!r}")
    if manifest.get("dtype", DTYPE) != DTYPE or manifest.get("layout", LAYOUT) != LAYOUT:
        raise FormatError("only f32le data in V,T,H,W row-major layout is supported")
    variables = _require(manifest, "variables")
    if not variables:
        raise FormatError("manifest lists no variables")
    dims = _require(manifest, "dims")
    n_var, n_time, n_lat, n_lon = (int(dims[k]) for k in "VTHW")
    start, end = (int(y) for y in _require(manifest, "years"))
    if n_var != len(variables) or n_time != end - start + 1:
        raise FormatError("dims disagree with variables or year range")
    lats = np.asarray(_require(manifest, "lat"), dtype=float)
    lons = np.asarray(_require(manifest, "lon"), dtype=float)
    if lats.size != n_lat or lons.size != n_lon:
        raise FormatError("lat/lon axes disagree with dims")

    base = manifest_path.parent
    data_path = base / manifest.get("data_file", manifest_path.with_suffix(".f32").name)
    mask_path = base / _require(manifest, "mask_file")
    try:
        raw = data_path.read_bytes()
        mask_raw = mask_path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read companion files of {manifest_path}: {exc}") from exc
    expected = n_var * n_time * n_lat * n_lon * 4
    if len(raw) != expected:
        raise FormatError(f"{data_path.name}: {len(raw)} bytes, expected {expected}")
    if len(mask_raw) == n_lat * n_lon:
        mask = np.frombuffer(mask_raw, dtype=np.uint8).reshape(n_lat, n_lon)
        mask = np.broadcast_to(mask, (n_var, n_lat, n_lon))
    elif len(mask_raw) == n_var * n_lat * n_lon:
        mask = np.frombuffer(mask_raw, dtype=np.uint8).reshape(n_var, n_lat, n_lon)
    else:
        raise FormatError(f"{mask_path.name}: {len(mask_raw)} bytes does not match the grid")
    if np.any(mask > 1):
        raise FormatError(f"{mask_path.name}: mask bytes must be 0 or 1")

    data = np.frombuffer(raw, dtype="<f4").reshape(n_var, n_time, n_lat, n_lon)
    try:
        return FieldStack(
            variables=tuple(v["name"] for v in variables),
            years=np.arange(start, end + 1),
            member=str(_require(manifest, "member")),
            data=data.astype(np.float32),
            grid=Grid(lats, lons),
            mask=mask.astype(bool),
            units={v["name"]: v.get("units", "") for v in variables},
        )
    except ShapeError as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc


def read_stacks(directory):
    """Read every ``member_*.json`` manifest in ``directory``, sorted by name.

    Other JSON files (run manifests, configs) may share the directory.
    """
    paths = sorted(Path(directory).glob("member_*.json"))
    if not paths:
        raise IoError(f"no stack manifests found in {directory}")
    return [read_stack(p) for p in paths]


@dataclass(frozen=True, order=True)
class SkillRow:
    """One accuracy value.  ``repetition == -1`` marks an ensemble mean or
    an analytic baseline (chance)."""

    model: str
    lead: int
    cls: str
    repetition: int
    accuracy: float
    n_test: int

    @property
    def key(self):
        return (self.model, self.lead, self.cls, self.repetition)

    @property
    def sort_key(self):
        return (self.model, self.lead, CLASS_NAMES.index(self.cls), self.repetition)


@dataclass
class SkillTable:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def add(self, *rows):
        self.rows.extend(rows)

    def sorted(self):
        return SkillTable(sorted(self.rows, key=lambda r: r.sort_key))

    def select(self, model=None, lead=None, cls=None, repetition=None):
        return [
            r
            for r in self.rows
            if (model is None or r.model == model)
            and (lead is None or r.lead == lead)
            and (cls is None or r.cls == cls)
            and (repetition is None or r.repetition == repetition)
        ]

    @property
    def models(self):
        return sorted({r.model for r in self.rows})

    @property
    def leads(self):
        return sorted({r.lead for r in self.rows})

    def validate(self):
        seen = set()
        for r in self.rows:
            if r.cls not in CLASS_NAMES:
                raise FormatError(f"unknown class {r.cls!r}")
            if r.key in seen:
                raise FormatError(f"duplicate skill row {r.key}")
            seen.add(r.key)
            if not (0.0 <= r.accuracy <= 1.0) or math.isnan(r.accuracy):
                raise FormatError(f"accuracy out of range in {r.key}: {r.accuracy}")


def write_skill_csv(table, path):
    """Write ``table`` sorted by (model, lead, class, repetition)."""
    if not len(table):
        raise FormatError("refusing to write an empty skill table")
    table.validate()
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SKILL_HEADER)
            for r in table.sorted():
                writer.writerow(
                    [r.model, r.lead, r.cls, r.repetition, f"{r.accuracy:.6f}", r.n_test]
                )
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_skill_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != SKILL_HEADER:
                raise FormatError(f"{path}: unexpected header {header}")
            rows = [
                SkillRow(m, int(lead), c, int(rep), float(acc), int(n))
                for m, lead, c, rep, acc, n in reader
            ]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from exc
    table = SkillTable(rows)
    table.validate()
    return table


def write_labels_csv(rows, path):
    """Write (member, year, index, label) tuples; ``label`` is a class name."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LABEL_HEADER)
            for member, year, index, label in rows:
                writer.writerow([member, int(year), repr(float(index)), label])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_labels_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != LABEL_HEADER:
                raise FormatError(f"{path}: unexpected header")
            return [(m, int(y), float(i), lab) for m, y, i, lab in reader]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from exc


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return Path(path)
