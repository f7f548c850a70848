"""Core time-series containers and their binary file formats.

Two little-endian formats are defined:

* NMEF -- per-modality feature series (T x D float32 payload)
* NMEB -- parcel-wise BOLD series (T x P float32 payload)

Values live on disk as float32 and are promoted to float64 for all
computation; containers quantize through float32 at construction so that
write-then-read round-trips are bit-exact.

A dataset split manifest is a UTF-8 text file with one ``role<TAB>source_id``
line per entry (roles: train, val, test_id, test_ood).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

MODALITIES = ("visual", "audio", "text")
MODALITY_CODES = {name: code for code, name in enumerate(MODALITIES)}

_NMEF_MAGIC = b"NMEF"
_NMEB_MAGIC = b"NMEB"
_FORMAT_VERSION = 1
_HEADER_SIZE = 64

SPLIT_ROLES = ("train", "val", "test_id", "test_ood")


class FormatError(ValueError):
    """A file does not conform to the NMEF/NMEB/manifest format."""


class DataError(ValueError):
    """In-memory data violates a container invariant."""


def _as_payload_matrix(values, n_rows: int, n_cols: int) -> np.ndarray:
    """Validate and quantize a value matrix through float32 to float64."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape != (n_rows, n_cols):
        raise DataError(
            f"values must be a {n_rows}x{n_cols} matrix, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise DataError("values contain non-finite entries")
    arr = arr.astype(np.float32).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("values overflow float32 storage range")
    arr.flags.writeable = False
    return arr


def _check_id(name: str, value: str, max_bytes: int) -> None:
    if not value:
        raise DataError(f"{name} must be non-empty")
    raw = value.encode("utf-8")
    if len(raw) > max_bytes:
        raise DataError(f"{name} exceeds {max_bytes} bytes when UTF-8 encoded")
    if b"\x00" in raw:
        raise DataError(f"{name} must not contain NUL bytes")


def _check_tr(tr_seconds: float) -> None:
    if not (np.isfinite(tr_seconds) and tr_seconds > 0):
        raise DataError("tr_seconds must be a positive finite duration")


@dataclass(frozen=True)
class FeatureSeries:
    """One modality's feature matrix over TR-aligned time (T x D)."""

    modality: str
    tr_seconds: float
    values: np.ndarray
    source_id: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")
        _check_tr(self.tr_seconds)
        _check_id("source_id", self.source_id, 32)
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise DataError("values must be a 2-D matrix")
        object.__setattr__(
            self, "values", _as_payload_matrix(arr, arr.shape[0], arr.shape[1])
        )

    @property
    def t_samples(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSeries):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.tr_seconds == other.tr_seconds
            and self.source_id == other.source_id
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class BoldSeries:
    """Parcel-wise BOLD responses (T x P) for one subject and stimulus."""

    tr_seconds: float
    values: np.ndarray
    source_id: str
    subject_id: str

    def __post_init__(self):
        _check_tr(self.tr_seconds)
        _check_id("source_id", self.source_id, 16)
        _check_id("subject_id", self.subject_id, 16)
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise DataError("values must be a 2-D matrix")
        if arr.shape[1] < 1:
            raise DataError("n_parcels must be >= 1")
        object.__setattr__(
            self, "values", _as_payload_matrix(arr, arr.shape[0], arr.shape[1])
        )

    @property
    def t_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_parcels(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, BoldSeries):
            return NotImplemented
        return (
            self.tr_seconds == other.tr_seconds
            and self.source_id == other.source_id
            and self.subject_id == other.subject_id
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint role assignment of source_ids for training and evaluation."""

    train: tuple = ()
    val: tuple = ()
    test_id: tuple = ()
    test_ood: tuple = ()

    def __post_init__(self):
        for role in SPLIT_ROLES:
            object.__setattr__(self, role, tuple(getattr(self, role)))
        seen = {}
        for role in SPLIT_ROLES:
            for sid in getattr(self, role):
                if sid in seen:
                    raise DataError(
                        f"source_id {sid!r} assigned to both {seen[sid]} and {role}"
                    )
                seen[sid] = role

    def all_sources(self) -> tuple:
        return self.train + self.val + self.test_id + self.test_ood


def atomic_write_bytes(path, data: bytes) -> None:
    """Write bytes to path via a temp file and atomic rename."""
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_feature_file(series: FeatureSeries, path) -> None:
    """Serialize a FeatureSeries to an NMEF file (atomic)."""

    tr_us = round(series.tr_seconds * 1e6)
    if tr_us <= 0:
        raise DataError("tr_seconds too small for microsecond storage")
    header = struct.pack(
        "<4sHBBQQQ32s",
        _NMEF_MAGIC,
        _FORMAT_VERSION,
        MODALITY_CODES[series.modality],
        0,
        series.t_samples,
        series.dim,
        tr_us,
        series.source_id.encode("utf-8"),
    )
    payload = np.ascontiguousarray(series.values, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_feature_file(path) -> FeatureSeries:
    """Parse an NMEF file, rejecting any malformed content."""

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, mod_code, reserved, t, d, tr_us, sid_raw = struct.unpack(
        "<4sHBBQQQ32s", raw[:_HEADER_SIZE]
    )
    if magic != _NMEF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if mod_code >= len(MODALITIES):
        raise FormatError(f"{path}: unknown modality code {mod_code}")
    expected = t * d * 4
    if len(raw) - _HEADER_SIZE != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - _HEADER_SIZE} bytes, "
            f"header declares {expected}"
        )
    try:
        source_id = sid_raw.rstrip(b"\x00").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: source_id is not valid UTF-8") from exc
    values = np.frombuffer(raw[_HEADER_SIZE:], dtype="<f4").reshape(t, d)
    try:
        return FeatureSeries(
            modality=MODALITIES[mod_code],
            tr_seconds=tr_us / 1e6,
            values=values,
            source_id=source_id,
        )
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_bold_file(series: BoldSeries, path) -> None:
    """Serialize a BoldSeries to an NMEB file (atomic)."""

    tr_us = round(series.tr_seconds * 1e6)
    if tr_us <= 0:
        raise DataError("tr_seconds too small for microsecond storage")
    header = struct.pack(
        "<4sHBBQQQ16s16s",
        _NMEB_MAGIC,
        _FORMAT_VERSION,
        0,
        0,
        series.t_samples,
        series.n_parcels,
        tr_us,
        series.source_id.encode("utf-8"),
        series.subject_id.encode("utf-8"),
    )
    payload = np.ascontiguousarray(series.values, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_bold_file(path) -> BoldSeries:
    """Parse an NMEB file, rejecting any malformed content."""

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, _r0, _r1, t, p, tr_us, sid_raw, subj_raw = struct.unpack(
        "<4sHBBQQQ16s16s", raw[:_HEADER_SIZE]
    )
    if magic != _NMEB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = t * p * 4
    if len(raw) - _HEADER_SIZE != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - _HEADER_SIZE} bytes, "
            f"header declares {expected}"
        )
    try:
        source_id = sid_raw.rstrip(b"\x00").decode("utf-8")
        subject_id = subj_raw.rstrip(b"\x00").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: id field is not valid UTF-8") from exc
    values = np.frombuffer(raw[_HEADER_SIZE:], dtype="<f4").reshape(t, p)
    try:
        return BoldSeries(
            tr_seconds=tr_us / 1e6,
            values=values,
            source_id=source_id,
            subject_id=subject_id,
        )
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_split(split: DatasetSplit, path) -> None:
    lines = []
    for role in SPLIT_ROLES:
        for sid in getattr(split, role):
            lines.append(f"{role}\t{sid}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_split(path) -> DatasetSplit:
    roles = {role: [] for role in SPLIT_ROLES}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'role<TAB>source_id'")
            role, sid = parts
            if role not in roles:
                raise FormatError(f"{path}:{lineno}: unknown role {role!r}")
            if not sid:
                raise FormatError(f"{path}:{lineno}: empty source_id")
            roles[role].append(sid)
    try:
        return DatasetSplit(**{k: tuple(v) for k, v in roles.items()})
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from exc
