"""Preference-pair datasets: binary embedding stores, JSON-lines manifests,
and a synthetic generator with controllable evidence placement.

The on-disk embedding store keeps float32 payloads (magic ``ADJE``);
sequences widen to float64 when materialized for the engine. Pair manifests
are one JSON object per line referencing store sequence ids.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import ConfigError
from .refine import TokenSequence

__all__ = [
    "REGIMES",
    "ManifestError",
    "StoreFormatError",
    "PreferencePair",
    "ResolvedPair",
    "SyntheticSpec",
    "EmbeddingStore",
    "load_embeddings",
    "load_pairs",
    "write_manifest",
    "load_dataset",
    "save_dataset",
    "generate_synthetic",
    "batch_iter",
]

REGIMES = ("terminal", "distributed", "sparse")

STORE_MAGIC = b"ADJE"
STORE_VERSION = 1

_MANIFEST_REQUIRED = ("id", "domain", "chosen", "rejected")
_MANIFEST_ALLOWED = frozenset(_MANIFEST_REQUIRED) | {"magnitude"}


class ManifestError(ValueError):
    """A pairs manifest is malformed or references missing sequences."""


class StoreFormatError(ValueError):
    """An embedding store file is malformed."""


@dataclass
class PreferencePair:
    """One manifest row: ids of the preferred and rejected sequences."""

    id: str
    domain: str
    chosen: int
    rejected: int
    magnitude: int = 0
    line: int = -1  # manifest line, for error messages

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ManifestError(f"pair {self.id!r}: chosen and rejected reference the same sequence")
        if self.magnitude < 0:
            raise ManifestError(f"pair {self.id!r}: magnitude must be >= 0, got {self.magnitude}")


@dataclass
class ResolvedPair:
    """A pair with both sequences materialized."""

    id: str
    domain: str
    magnitude: int
    chosen_seq: TokenSequence
    rejected_seq: TokenSequence


@dataclass
class SyntheticSpec:
    """Controls for one generated dataset.

    A unit quality direction is drawn once per dataset; each pair injects
    ``signal_strength`` times that direction into the chosen response and
    its negation into the rejected one, at positions decided by ``regime``:
    the final response token (terminal), spread evenly over all response
    tokens (distributed), or one random non-final response token (sparse).
    Prompt rows are shared between the two sides; everything else is
    i.i.d. normal noise.
    """

    regime: str
    d: int = 32
    n_pairs: int = 1000
    prompt_len: tuple[int, int] = (4, 8)
    response_len: tuple[int, int] = (10, 20)
    signal_strength: float = 2.5
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.prompt_len = (int(self.prompt_len[0]), int(self.prompt_len[1]))
        self.response_len = (int(self.response_len[0]), int(self.response_len[1]))
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.n_pairs < 1:
            raise ConfigError(f"n_pairs must be >= 1, got {self.n_pairs}")
        for label, (lo, hi) in (("prompt_len", self.prompt_len), ("response_len", self.response_len)):
            if lo < 1 or hi < lo:
                raise ConfigError(f"{label} range ({lo}, {hi}) must satisfy 1 <= lo <= hi")
        if self.regime == "sparse" and self.response_len[0] < 2:
            raise ConfigError("sparse regime needs response_len >= 2 (the final token is excluded)")
        if self.noise_std < 0.0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")


class EmbeddingStore:
    """Sequence-id keyed collection of float32 token embeddings."""

    def __init__(self, dim: int):
        if dim < 1:
            raise StoreFormatError(f"store dim must be >= 1, got {dim}")
        self.dim = dim
        self._records: dict[int, tuple[np.ndarray, int]] = {}
        self._cache: dict[int, TokenSequence] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, seq_id: int) -> bool:
        return seq_id in self._records

    def ids(self) -> list[int]:
        return sorted(self._records)

    def add(self, seq_id: int, embeddings: np.ndarray, prompt_len: int) -> None:
        emb = np.asarray(embeddings, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[1] != self.dim:
            raise StoreFormatError(
                f"sequence {seq_id}: embeddings {emb.shape} do not match store dim {self.dim}"
            )
        if seq_id in self._records:
            raise StoreFormatError(f"duplicate sequence id {seq_id}")
        if not 1 <= prompt_len < emb.shape[0]:
            raise StoreFormatError(
                f"sequence {seq_id}: prompt_len {prompt_len} leaves no response tokens (L={emb.shape[0]})"
            )
        self._records[seq_id] = (emb, int(prompt_len))

    def get(self, seq_id: int) -> TokenSequence:
        """Materialize a sequence, widened to float64, with derived masks:
        every stored token is real, and everything after the prompt is
        response."""
        cached = self._cache.get(seq_id)
        if cached is not None:
            return cached
        if seq_id not in self._records:
            raise StoreFormatError(f"unknown sequence id {seq_id}")
        emb32, prompt_len = self._records[seq_id]
        length = emb32.shape[0]
        response = np.zeros(length)
        response[prompt_len:] = 1.0
        seq = TokenSequence(
            embeddings=emb32.astype(np.float64),
            response_mask=response,
            prompt_len=prompt_len,
            pad_mask=np.ones(length),
        )
        self._cache[seq_id] = seq
        return seq

    def raw(self, seq_id: int) -> tuple[np.ndarray, int]:
        return self._records[seq_id]

    def save(self, path: Path | str) -> None:
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(struct.pack("<I", STORE_VERSION))
            fh.write(struct.pack("<I", self.dim))
            fh.write(struct.pack("<Q", len(self._records)))
            for seq_id in sorted(self._records):
                emb, prompt_len = self._records[seq_id]
                fh.write(struct.pack("<QII", seq_id, emb.shape[0], prompt_len))
                fh.write(np.ascontiguousarray(emb, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: Path | str) -> "EmbeddingStore":
        path = Path(path)
        blob = path.read_bytes()
        pos = 0

        def take(n: int, what: str) -> bytes:
            nonlocal pos
            if pos + n > len(blob):
                raise StoreFormatError(f"{path}: truncated reading {what} at offset {pos}")
            chunk = blob[pos : pos + n]
            pos += n
            return chunk

        if take(4, "magic") != STORE_MAGIC:
            raise StoreFormatError(f"{path}: bad magic, not an embedding store")
        (version,) = struct.unpack("<I", take(4, "version"))
        if version != STORE_VERSION:
            raise StoreFormatError(f"{path}: unsupported store version {version}")
        (dim,) = struct.unpack("<I", take(4, "dim"))
        (count,) = struct.unpack("<Q", take(8, "count"))
        store = cls(dim)
        for i in range(count):
            seq_id, length, prompt_len = struct.unpack("<QII", take(16, f"record {i} header"))
            payload = take(4 * length * dim, f"record {i} payload")
            emb = np.frombuffer(payload, dtype="<f4").reshape(length, dim)
            store.add(seq_id, emb, prompt_len)
        if pos != len(blob):
            raise StoreFormatError(f"{path}: {len(blob) - pos} trailing bytes at offset {pos}")
        return store


def load_embeddings(path: Path | str) -> EmbeddingStore:
    return EmbeddingStore.load(path)


def load_pairs(path: Path | str) -> list[PreferencePair]:
    """Parse a JSON-lines manifest; strict about fields and duplicate ids."""
    path = Path(path)
    pairs: list[PreferencePair] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
            if not isinstance(row, dict):
                raise ManifestError(f"{path}:{line_no}: expected an object per line")
            unknown = set(row) - _MANIFEST_ALLOWED
            if unknown:
                raise ManifestError(f"{path}:{line_no}: unknown field(s) {sorted(unknown)}")
            missing = [k for k in _MANIFEST_REQUIRED if k not in row]
            if missing:
                raise ManifestError(f"{path}:{line_no}: missing field(s) {missing}")
            if not isinstance(row["id"], str) or not isinstance(row["domain"], str):
                raise ManifestError(f"{path}:{line_no}: id and domain must be strings")
            for key in ("chosen", "rejected"):
                if not isinstance(row[key], int) or isinstance(row[key], bool) or row[key] < 0:
                    raise ManifestError(f"{path}:{line_no}: {key} must be a non-negative integer")
            magnitude = row.get("magnitude", 0)
            if not isinstance(magnitude, int) or isinstance(magnitude, bool) or magnitude < 0:
                raise ManifestError(f"{path}:{line_no}: magnitude must be a non-negative integer")
            if row["id"] in seen:
                raise ManifestError(f"{path}:{line_no}: duplicate pair id {row['id']!r}")
            seen.add(row["id"])
            try:
                pairs.append(
                    PreferencePair(
                        id=row["id"],
                        domain=row["domain"],
                        chosen=row["chosen"],
                        rejected=row["rejected"],
                        magnitude=magnitude,
                        line=line_no,
                    )
                )
            except ManifestError as exc:
                raise ManifestError(f"{path}:{line_no}: {exc}") from None
    return pairs


def write_manifest(pairs: Iterable[PreferencePair], path: Path | str) -> None:
    """One JSON object per line; magnitude is omitted when unannotated."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            row: dict = {
                "id": pair.id,
                "domain": pair.domain,
                "chosen": pair.chosen,
                "rejected": pair.rejected,
            }
            if pair.magnitude > 0:
                row["magnitude"] = pair.magnitude
            fh.write(json.dumps(row) + "\n")


def resolve_pairs(pairs: Sequence[PreferencePair], store: EmbeddingStore) -> list[ResolvedPair]:
    resolved = []
    for pair in pairs:
        for label, seq_id in (("chosen", pair.chosen), ("rejected", pair.rejected)):
            if seq_id not in store:
                where = f" (manifest line {pair.line})" if pair.line > 0 else ""
                raise ManifestError(
                    f"pair {pair.id!r}{where}: {label} references missing sequence {seq_id}"
                )
        resolved.append(
            ResolvedPair(
                id=pair.id,
                domain=pair.domain,
                magnitude=pair.magnitude,
                chosen_seq=store.get(pair.chosen),
                rejected_seq=store.get(pair.rejected),
            )
        )
    return resolved


STORE_FILENAME = "store.adje"
MANIFEST_FILENAME = "pairs.jsonl"


def save_dataset(store: EmbeddingStore, pairs: Sequence[PreferencePair], out_dir: Path | str) -> Path:
    """Write the standard dataset directory layout."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store.save(out_dir / STORE_FILENAME)
    write_manifest(pairs, out_dir / MANIFEST_FILENAME)
    return out_dir


def load_dataset(path: Path | str) -> list[ResolvedPair]:
    """Load a dataset directory (or an explicit manifest path next to its
    store) and resolve every pair."""
    path = Path(path)
    if path.is_dir():
        store_path = path / STORE_FILENAME
        manifest_path = path / MANIFEST_FILENAME
    else:
        manifest_path = path
        store_path = path.parent / STORE_FILENAME
    if not store_path.exists():
        raise StoreFormatError(f"missing embedding store {store_path}")
    if not manifest_path.exists():
        raise ManifestError(f"missing pairs manifest {manifest_path}")
    store = EmbeddingStore.load(store_path)
    return resolve_pairs(load_pairs(manifest_path), store)


def generate_synthetic(spec: SyntheticSpec) -> tuple[EmbeddingStore, list[PreferencePair]]:
    """Build one synthetic preference dataset per the spec's regime."""
    rng = np.random.default_rng(spec.seed)
    direction = rng.normal(size=spec.d)
    direction /= np.linalg.norm(direction)

    store = EmbeddingStore(spec.d)
    pairs: list[PreferencePair] = []
    for i in range(spec.n_pairs):
        p_lo, p_hi = spec.prompt_len
        r_lo, r_hi = spec.response_len
        lx = int(rng.integers(p_lo, p_hi + 1))
        ly = int(rng.integers(r_lo, r_hi + 1))
        prompt = rng.normal(0.0, spec.noise_std, size=(lx, spec.d))
        resp_chosen = rng.normal(0.0, spec.noise_std, size=(ly, spec.d))
        resp_rejected = rng.normal(0.0, spec.noise_std, size=(ly, spec.d))

        if spec.regime == "terminal":
            rows, amount = [ly - 1], spec.signal_strength
        elif spec.regime == "distributed":
            rows, amount = list(range(ly)), spec.signal_strength / ly
        else:  # sparse: one random non-final response token
            rows, amount = [int(rng.integers(0, ly - 1))], spec.signal_strength
        for r in rows:
            resp_chosen[r] += amount * direction
            resp_rejected[r] -= amount * direction

        chosen_id, rejected_id = 2 * i, 2 * i + 1
        store.add(chosen_id, np.vstack([prompt, resp_chosen]).astype(np.float32), lx)
        store.add(rejected_id, np.vstack([prompt, resp_rejected]).astype(np.float32), lx)
        pairs.append(
            PreferencePair(
                id=f"{spec.regime}-{i:05d}",
                domain=spec.regime,
                chosen=chosen_id,
                rejected=rejected_id,
            )
        )
    return store, pairs


def batch_iter(
    pairs: Sequence, batch_pairs: int, seed: int, epoch: int
) -> list[list]:
    """Deterministic per-epoch shuffle chunked into batches; the final short
    batch is kept."""
    if batch_pairs < 1:
        raise ConfigError(f"batch_pairs must be >= 1, got {batch_pairs}")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    return [
        [pairs[j] for j in order[i : i + batch_pairs]]
        for i in range(0, len(pairs), batch_pairs)
    ]
