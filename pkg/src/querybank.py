# src/querybank.py
"""
Event query vectors.

Queries are built offline from a text prompt ("sound of {class}") or from
event-only audio crops, unit-normalised, and kept in a ``QueryStore`` whose
order defines the prediction columns: base classes first, then novel ones.

Store file layout (UTF-8, tab-separated)::

    # dasm-querystore 1.0	dim=<D>	provider=<name>	seed=<s>	mel_bins=<m>
    class_id	role	modality	dim	payload	provenance

``payload`` is the hex encoding of the little-endian float32 vector and
``provenance`` is a JSON string (prompt text or list of source segments).
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .events import Roster
from .frontend import InputError, MelSpectrogram
from .numerics.core_defs import ConfigurationError

logger = logging.getLogger(__name__)

STORE_VERSION = "1.0"
_HEADER_PREFIX = "# dasm-querystore"
PROMPT_TEMPLATE = "sound of {}"

Modality = Literal["text", "audio"]
Role = Literal["base", "novel"]


class EmbeddingProvider(Protocol):
    dim: int

    def embed_text(self, prompt: str) -> np.ndarray: ...

    def embed_audio(self, features: MelSpectrogram) -> np.ndarray: ...


@dataclass(frozen=True)
class StubEmbeddingProvider:
    """
    Deterministic stand-in for a joint audio-text embedder.

    Text: sha256(seed, prompt) seeds a Gaussian D-vector.
    Audio: each frame is standardised across mel bins and projected by a fixed
    seeded [mel_bins, D] matrix, giving a [frames, D] sequence.
    """

    dim: int
    seed: int = 0
    mel_bins: int = 64
    name: str = "stub"

    def embed_text(self, prompt: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{prompt}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.dim)

    def _projection(self) -> np.ndarray:
        return _audio_projection(self.seed, self.mel_bins, self.dim)

    def embed_audio(self, features: MelSpectrogram) -> np.ndarray:
        x = features.values.astype(np.float64)
        if x.ndim != 2 or x.shape[1] != self.mel_bins:
            raise InputError(f"audio query features {x.shape} do not have {self.mel_bins} mel bins")
        x = x - x.mean(axis=1, keepdims=True)
        x = x / (x.std(axis=1, keepdims=True) + 1e-6)
        return x @ self._projection()

    def header(self) -> Dict[str, str]:
        return {"provider": self.name, "seed": str(self.seed), "mel_bins": str(self.mel_bins)}


_PROJECTIONS: Dict[Tuple[int, int, int], np.ndarray] = {}


def _audio_projection(seed: int, mel_bins: int, dim: int) -> np.ndarray:
    key = (seed, mel_bins, dim)
    if key not in _PROJECTIONS:
        rng = np.random.default_rng([seed, 0xA0D10])
        _PROJECTIONS[key] = rng.standard_normal((mel_bins, dim)) / np.sqrt(mel_bins)
    return _PROJECTIONS[key]


@dataclass(frozen=True)
class QueryVector:
    class_id: str
    embedding: np.ndarray
    modality: Modality
    role: Role = "base"


def normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm == 0.0:
        raise InputError(f"cannot normalise a vector of norm {norm}")
    return (np.asarray(vec, dtype=np.float64) / norm).astype(np.float32)


# ---------------------------------------------------------------------------
#  Query construction
# ---------------------------------------------------------------------------
def build_text_query(class_name: str, provider: EmbeddingProvider, class_id: Optional[str] = None, role: Role = "base") -> QueryVector:
    if not class_name or not class_name.strip():
        raise InputError("class name for a text query must be non-empty")
    vec = provider.embed_text(PROMPT_TEMPLATE.format(class_name.strip()))
    return QueryVector(class_id or class_name, normalize(vec), "text", role)


def build_audio_query(
    segments: Sequence[MelSpectrogram],
    provider: EmbeddingProvider,
    class_id: str,
    role: Role = "base",
) -> QueryVector:
    """Time-mean of each segment's embedding, averaged with segment-length weights."""
    if not segments:
        raise InputError(f"audio query for {class_id!r} needs at least one segment")
    total = np.zeros(provider.dim, dtype=np.float64)
    weight = 0
    for seg in segments:
        seq = provider.embed_audio(seg)
        total += seq.mean(axis=0) * seq.shape[0]
        weight += seq.shape[0]
    return QueryVector(class_id, normalize(total / weight), "audio", role)


def sample_modality(
    class_id: str,
    rng: np.random.Generator,
    mode: Literal["text", "audio", "mixed"] = "mixed",
    available: Iterable[Modality] = ("text", "audio"),
) -> Modality:
    have = set(available)
    if not have:
        raise ConfigurationError(f"class {class_id!r} has neither a text nor an audio query")
    if mode in ("text", "audio"):
        return mode if mode in have else next(iter(have))  # type: ignore[return-value]
    if have == {"text", "audio"}:
        return "text" if rng.random() < 0.5 else "audio"
    return next(iter(have))  # type: ignore[return-value]


def subsample_segments(
    segments: Sequence[MelSpectrogram],
    total_seconds: float,
    rng: np.random.Generator,
) -> Tuple[List[MelSpectrogram], float]:
    """
    Random subset of ``segments`` totalling ``total_seconds``; the last chosen
    segment is cropped to fit. Requests beyond the available audio are clamped.
    """
    available = sum(s.frames * s.hop_seconds for s in segments)
    if total_seconds >= available - 1e-9:
        if total_seconds > available + 1e-9:
            logger.warning("requested %.2f s of query audio, only %.2f s available; using all", total_seconds, available)
        return list(segments), available
    picked: List[MelSpectrogram] = []
    used = 0.0
    for idx in rng.permutation(len(segments)):
        seg = segments[int(idx)]
        remaining = total_seconds - used
        if remaining <= 0:
            break
        length = seg.frames * seg.hop_seconds
        if length > remaining:
            seg = seg.crop(0.0, remaining)
            length = seg.frames * seg.hop_seconds
        picked.append(seg)
        used += length
    return picked, used


def event_segments(
    spectra: Mapping[str, MelSpectrogram],
    roster: Roster,
    class_ids: Optional[Iterable[str]] = None,
) -> Dict[str, List[MelSpectrogram]]:
    """Event-only crops per class, in clip then onset order."""
    wanted = set(class_ids) if class_ids is not None else None
    out: Dict[str, List[MelSpectrogram]] = {}
    for clip in sorted(roster):
        if clip not in spectra:
            continue
        for ev in roster[clip]:
            if wanted is not None and ev.class_id not in wanted:
                continue
            out.setdefault(ev.class_id, []).append(spectra[clip].crop(ev.onset, ev.offset))
    return out


# ---------------------------------------------------------------------------
#  Store
# ---------------------------------------------------------------------------
@dataclass
class StoreEntry:
    class_id: str
    role: Role
    vectors: Dict[str, np.ndarray] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)

    def available(self) -> Tuple[str, ...]:
        return tuple(m for m in ("text", "audio") if m in self.vectors)


class QueryStore:
    """Ordered class queries; base entries always precede novel ones."""

    def __init__(self, dim: int, header: Optional[Mapping[str, str]] = None) -> None:
        self.dim = dim
        self.header: Dict[str, str] = dict(header or {})
        self._entries: Dict[str, StoreEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, class_id: object) -> bool:
        return class_id in self._entries

    @property
    def entries(self) -> List[StoreEntry]:
        base = [e for e in self._entries.values() if e.role == "base"]
        novel = [e for e in self._entries.values() if e.role == "novel"]
        return base + novel

    def entry(self, class_id: str) -> StoreEntry:
        try:
            return self._entries[class_id]
        except KeyError:
            raise InputError(f"class {class_id!r} is not in the query store") from None

    def class_ids(self, role: Optional[Role] = None) -> List[str]:
        return [e.class_id for e in self.entries if role is None or e.role == role]

    def add(self, query: QueryVector, provenance: Any = None) -> None:
        if query.embedding.shape != (self.dim,):
            raise InputError(f"query {query.class_id!r} has shape {query.embedding.shape}, store dim is {self.dim}")
        entry = self._entries.get(query.class_id)
        if entry is None:
            entry = self._entries[query.class_id] = StoreEntry(query.class_id, query.role)
        elif entry.role != query.role:
            raise InputError(f"class {query.class_id!r} already stored with role {entry.role}")
        elif query.modality in entry.vectors:
            raise InputError(f"duplicate {query.modality} query for class {query.class_id!r}")
        entry.vectors[query.modality] = np.asarray(query.embedding, dtype=np.float32)
        if provenance is not None:
            entry.provenance[query.modality] = provenance

    def set_role(self, class_id: str, role: Role) -> None:
        self.entry(class_id).role = role

    def vector(self, class_id: str, modality: Modality) -> np.ndarray:
        entry = self.entry(class_id)
        if modality not in entry.vectors:
            raise ConfigurationError(f"class {class_id!r} has no {modality} query (has {entry.available()})")
        return entry.vectors[modality]

    def query(self, class_id: str, modality: Modality) -> QueryVector:
        entry = self.entry(class_id)
        return QueryVector(class_id, self.vector(class_id, modality), modality, entry.role)

    def matrix(self, class_ids: Sequence[str], modalities: Union[Modality, Sequence[Modality]]) -> np.ndarray:
        if isinstance(modalities, str):
            modalities = [modalities] * len(class_ids)
        return np.stack([self.vector(c, m) for c, m in zip(class_ids, modalities)]).astype(np.float32)

    # -- persistence ---------------------------------------------------------
    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = "\t".join(f"{k}={v}" for k, v in sorted({"dim": str(self.dim), **self.header}.items()))
        lines = [f"{_HEADER_PREFIX} {STORE_VERSION}\t{meta}", "class_id\trole\tmodality\tdim\tpayload\tprovenance"]
        for entry in self.entries:
            for modality in entry.available():
                payload = entry.vectors[modality].astype("<f4").tobytes().hex()
                prov = json.dumps(entry.provenance.get(modality), sort_keys=True)
                lines.append(f"{entry.class_id}\t{entry.role}\t{modality}\t{self.dim}\t{payload}\t{prov}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.info("query store written: %s (%d classes)", path, len(self))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "QueryStore":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(_HEADER_PREFIX):
            raise InputError(f"{path}: missing query store header")
        fields = lines[0][len(_HEADER_PREFIX):].strip().split("\t")
        version, meta = fields[0], dict(f.split("=", 1) for f in fields[1:] if "=" in f)
        if version.split(".")[0] != STORE_VERSION.split(".")[0]:
            raise InputError(f"{path}: query store format {version} is not compatible with {STORE_VERSION}")
        dim = int(meta.pop("dim"))
        store = cls(dim, meta)
        for lineno, line in enumerate(lines[2:], start=3):
            if not line.strip():
                continue
            class_id, role, modality, d, payload, prov = line.split("\t", 5)
            if int(d) != dim:
                raise InputError(f"{path}:{lineno}: row dim {d} != store dim {dim}")
            vec = np.frombuffer(bytes.fromhex(payload), dtype="<f4").astype(np.float32)
            store.add(QueryVector(class_id, vec, modality, role), json.loads(prov))  # type: ignore[arg-type]
        return store

    def provider(self) -> StubEmbeddingProvider:
        if self.header.get("provider", "stub") != "stub":
            raise ConfigurationError(f"store was built with provider {self.header.get('provider')!r}; only 'stub' can be rebuilt")
        return StubEmbeddingProvider(self.dim, int(self.header.get("seed", 0)), int(self.header.get("mel_bins", 64)))


def assemble_inference_queries(
    store: QueryStore,
    novel: Sequence[QueryVector] = (),
    modality: Modality = "text",
    base_ids: Optional[Sequence[str]] = None,
) -> Tuple[List[str], np.ndarray, int]:
    """
    Base queries in store order followed by ``novel`` in the given order.
    Returns (class_ids, [N, D] matrix, n_base).
    """
    base = list(base_ids) if base_ids is not None else store.class_ids("base")
    ids = base + [q.class_id for q in novel]
    dupes = sorted(c for c, n in Counter(ids).items() if n > 1)
    if dupes:
        raise InputError(f"duplicate class ids in query set: {dupes}")
    rows = [store.vector(c, modality if modality in store.entry(c).vectors else store.entry(c).available()[0]) for c in base]
    rows += [np.asarray(q.embedding, dtype=np.float32) for q in novel]
    if rows and any(r.shape != (store.dim,) for r in rows):
        raise InputError(f"query dims disagree with store dim {store.dim}")
    matrix = np.stack(rows).astype(np.float32) if rows else np.zeros((0, store.dim), np.float32)
    return ids, matrix, len(base)
