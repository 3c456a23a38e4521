"""Delta log persistence, vector representation, and filtering.

A log directory holds manifest.json (model layout, device table, record
index with byte offsets) next to deltas.bin (magic header followed by
per-record little-endian float32 payloads, layers concatenated in manifest
order). Floats are 32-bit only here, at the persistence boundary; reading
restores float64 arrays whose values are exactly the stored float32 ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .federated import DeltaRecord
from .nn import ParamVector
from .seeding import rng_from

MAGIC = b"DLOG0001"
FORMAT_NAME = "delta-log"
FORMAT_VERSION = 1

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "deltas.bin"


class DeltaStoreError(Exception):
    """Base class for log file problems."""


class CorruptHeaderError(DeltaStoreError):
    """Bad magic bytes or an unusable manifest."""


class ShapeMismatchError(DeltaStoreError):
    """Record layout disagrees with the manifest layout."""


class TruncatedPayloadError(DeltaStoreError):
    """deltas.bin is shorter than the record index requires."""


@dataclass
class DeltaManifest:
    version: int
    layers: list[tuple[str, tuple[int, ...]]]
    rounds: int
    devices: list[tuple[int, int, str, int]]  # (device_id, user_id, role, n_k)
    index: list[tuple[int, int, int]]  # (round_t, device_id, byte offset)

    def record_nbytes(self) -> int:
        return sum(int(np.prod(shape)) * 4 for _, shape in self.layers)


@dataclass(frozen=True)
class ReprConfig:
    """Which layer becomes the attack feature vector, and whether to L2
    normalize it (zero vectors pass through unchanged)."""

    layer_name: str
    normalize: bool = True


def manifest_for(
    records: Sequence[DeltaRecord],
    layout: Sequence[tuple[str, tuple[int, ...]]],
    rounds: int,
) -> DeltaManifest:
    devices = sorted({(r.device_id, r.user_id, r.role, r.n_k) for r in records})
    return DeltaManifest(
        version=FORMAT_VERSION,
        layers=[(n, tuple(s)) for n, s in layout],
        rounds=rounds,
        devices=devices,
        index=[],  # filled in by write_records
    )


def write_records(path, manifest: DeltaManifest, records: Sequence[DeltaRecord]) -> DeltaManifest:
    """Write manifest.json + deltas.bin into the directory `path`.

    The record index (offsets) is recomputed here; the returned manifest is
    the one that was written.
    """
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    layout = [(n, tuple(s)) for n, s in manifest.layers]
    for _, shape in layout:
        if any(d < 1 for d in shape):
            raise ShapeMismatchError(f"manifest layer shapes must be positive, got {shape}")
    for r in records:
        if r.delta.layout() != layout:
            raise ShapeMismatchError(
                f"record (round {r.round_t}, device {r.device_id}) layout "
                f"{r.delta.layout()} does not match manifest layout {layout}"
            )
    size = manifest.record_nbytes()
    index = []
    chunks = [MAGIC]
    offset = len(MAGIC)
    for r in records:
        index.append((r.round_t, r.device_id, offset))
        for _, arr in r.delta.layers:
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        offset += size
    (directory / PAYLOAD_NAME).write_bytes(b"".join(chunks))

    written = DeltaManifest(
        version=manifest.version,
        layers=layout,
        rounds=manifest.rounds,
        devices=list(manifest.devices),
        index=index,
    )
    doc = {
        "format": FORMAT_NAME,
        "version": written.version,
        "rounds": written.rounds,
        "layers": [[n, list(s)] for n, s in written.layers],
        "devices": [[d, u, role, n] for d, u, role, n in written.devices],
        "index": [[t, d, off] for t, d, off in written.index],
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return written


def read_records(path) -> tuple[DeltaManifest, list[DeltaRecord]]:
    """Load a log directory back into memory, validating header, shapes and
    payload length with distinct errors for each failure mode."""
    directory = Path(path)
    try:
        doc = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise CorruptHeaderError(f"unreadable manifest: {err}") from err
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise CorruptHeaderError(f"not a {FORMAT_NAME} manifest")
    if doc.get("version") != FORMAT_VERSION:
        raise CorruptHeaderError(f"unsupported log version {doc.get('version')!r}")
    try:
        manifest = DeltaManifest(
            version=int(doc["version"]),
            layers=[(str(n), tuple(int(d) for d in s)) for n, s in doc["layers"]],
            rounds=int(doc["rounds"]),
            devices=[(int(d), int(u), str(role), int(n)) for d, u, role, n in doc["devices"]],
            index=[(int(t), int(d), int(off)) for t, d, off in doc["index"]],
        )
    except (KeyError, TypeError, ValueError) as err:
        raise CorruptHeaderError(f"malformed manifest: {err}") from err
    for _, shape in manifest.layers:
        if any(d < 1 for d in shape):
            raise ShapeMismatchError(f"manifest layer shapes must be positive, got {shape}")

    payload = (directory / PAYLOAD_NAME).read_bytes()
    if payload[: len(MAGIC)] != MAGIC:
        raise CorruptHeaderError("wrong magic bytes in deltas.bin")
    size = manifest.record_nbytes()
    by_device = {d: (u, role, n) for d, u, role, n in manifest.devices}
    records: list[DeltaRecord] = []
    for round_t, device_id, offset in manifest.index:
        if offset < len(MAGIC):
            raise CorruptHeaderError(f"record offset {offset} overlaps the header")
        if offset + size > len(payload):
            raise TruncatedPayloadError(
                f"record (round {round_t}, device {device_id}) needs bytes "
                f"[{offset}, {offset + size}) but the payload has {len(payload)}"
            )
        if device_id not in by_device:
            raise CorruptHeaderError(f"record references unknown device {device_id}")
        user_id, role, n_k = by_device[device_id]
        flat = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=offset)
        layers, pos = [], 0
        for name, shape in manifest.layers:
            count = int(np.prod(shape))
            layers.append((name, flat[pos : pos + count].astype(np.float64).reshape(shape)))
            pos += count
        records.append(
            DeltaRecord(
                round_t=round_t,
                device_id=device_id,
                user_id=user_id,
                role=role,
                delta=ParamVector(layers),
                n_k=n_k,
            )
        )
    return manifest, records


def represent_delta(record: DeltaRecord, cfg: ReprConfig) -> np.ndarray:
    """Select one layer, flatten row-major, optionally L2 normalize."""
    vec = record.delta.get(cfg.layer_name).ravel(order="C").astype(np.float64)
    if cfg.normalize:
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec = vec / norm
    return vec


def filter_records(
    records: Iterable[DeltaRecord],
    epoch_range: tuple[int, int] | None = None,
    roles: Sequence[str] | None = None,
    max_per_user: int | None = None,
    seed: int = 0,
) -> list[DeltaRecord]:
    """Select by half-open round range [lo, hi), role set, and an optional
    seeded per-user subsample; the surviving records keep log order."""
    out = list(records)
    if epoch_range is not None:
        lo, hi = epoch_range
        if lo >= hi:
            raise ValueError(f"empty epoch range [{lo}, {hi})")
        out = [r for r in out if lo <= r.round_t < hi]
    if roles is not None:
        allowed = set(roles)
        out = [r for r in out if r.role in allowed]
    if max_per_user is not None:
        if max_per_user < 1:
            raise ValueError("max_per_user must be >= 1")
        by_user: dict[int, list[int]] = {}
        for i, r in enumerate(out):
            by_user.setdefault(r.user_id, []).append(i)
        keep = set()
        for user, idx in sorted(by_user.items()):
            if len(idx) <= max_per_user:
                keep.update(idx)
            else:
                take = rng_from(seed, "max-per-user", user).choice(
                    len(idx), size=max_per_user, replace=False
                )
                keep.update(idx[i] for i in take)
        out = [r for i, r in enumerate(out) if i in keep]
    return out
