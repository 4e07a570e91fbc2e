"""Trajectory knowledge base: (feature of x_k, latent x_v) pairs from the
public reference split, exact cosine search, and the RPKB file format.

Entries are kept sorted by ``(source_index, replicate)`` so that ``argmax``
over similarities already breaks ties toward the lower source index.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoisePredictor, VarianceSchedule, forward_diffuse
from .features import extract_features
from .nn import DenseNet, DimensionError

MAGIC = b"RPKB"
VERSION = 1
METRICS = {"cosine": 0}
_HEADER = struct.Struct("<4sHBIIIIQ")
_ZERO = bytes(32)


class KbMismatchError(ValueError):
    """A KB is being used with models other than the ones it was built from."""


@dataclass(frozen=True)
class KbEntry:
    key: np.ndarray
    value: np.ndarray
    label: int | None
    source_index: int


@dataclass
class KbManifest:
    denoiser_sha256: bytes = _ZERO
    extractor_sha256: bytes = _ZERO
    schedule_sha256: bytes = _ZERO
    seed: int = 0


@dataclass
class KnowledgeBase:
    keys: np.ndarray  # (N, d_feat), unit rows
    values: np.ndarray  # (N, d_data)
    labels: np.ndarray  # (N,) int32, -1 = unlabeled
    source_index: np.ndarray  # (N,) uint64
    k_timestep: int
    v_timestep: int
    metric: str = "cosine"
    manifest: KbManifest = field(default_factory=KbManifest)

    def __post_init__(self):
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.source_index = np.asarray(self.source_index, dtype=np.uint64)
        n = len(self.keys)
        if not (len(self.values) == len(self.labels) == len(self.source_index) == n):
            raise DimensionError("KB arrays disagree in length")
        if self.k_timestep <= self.v_timestep:
            raise ValueError("k_timestep must exceed v_timestep")
        if n and not np.allclose(np.linalg.norm(self.keys, axis=1), 1.0, atol=1e-9):
            raise ValueError("KB keys must be unit norm")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("KB values must be finite")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def d_feat(self) -> int:
        return self.keys.shape[1]

    @property
    def d_data(self) -> int:
        return self.values.shape[1]

    def entry(self, i: int) -> KbEntry:
        lab = int(self.labels[i])
        return KbEntry(
            self.keys[i], self.values[i], None if lab < 0 else lab, int(self.source_index[i])
        )

    @property
    def entries(self) -> list[KbEntry]:
        return [self.entry(i) for i in range(len(self))]

    def subset(self, n: int) -> "KnowledgeBase":
        """The first ``n`` entries (a prefix by source index)."""
        return KnowledgeBase(
            self.keys[:n], self.values[:n], self.labels[:n], self.source_index[:n],
            self.k_timestep, self.v_timestep, self.metric, self.manifest,
        )

    def check_models(self, denoiser_sha=None, extractor_sha=None, schedule_sha=None):
        for name, want, got in (
            ("denoiser", self.manifest.denoiser_sha256, denoiser_sha),
            ("extractor", self.manifest.extractor_sha256, extractor_sha),
            ("schedule", self.manifest.schedule_sha256, schedule_sha),
        ):
            if got is not None and got != want:
                raise KbMismatchError(f"{name} checksum does not match KB manifest")


def entry_noise(seed: int, source_index: int, replicate: int, dim: int) -> np.ndarray:
    """The forward-noise draw for one KB entry (its own rng substream)."""
    rng = np.random.default_rng([seed, source_index, replicate])
    return rng.standard_normal(dim)


def build_kb(
    data: np.ndarray,
    denoiser: NoisePredictor,
    extractor: DenseNet,
    schedule: VarianceSchedule,
    k: int,
    v: int,
    seed: int,
    labels: np.ndarray | None = None,
    entries_per_example: int = 1,
    manifest: KbManifest | None = None,
) -> KnowledgeBase:
    """One key/value pair per example (per replicate) from a shared noise draw.

    x_k and x_v come from the same eps, so both lie on one forward
    trajectory of x. Costs one denoiser call per entry.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if not 0 < v < k <= schedule.T:
        raise ValueError(f"need 0 < v < k <= T, got v={v}, k={k}")
    n, d = data.shape
    if labels is not None and len(labels) != n:
        raise DimensionError("labels and data differ in length")
    m = entries_per_example
    src = np.repeat(np.arange(n), m)
    rep = np.tile(np.arange(m), n)
    eps = np.stack([entry_noise(seed, int(s), int(r), d) for s, r in zip(src, rep)])
    if not len(eps):
        eps = np.zeros((0, d))
    x = data[src]
    x_k = forward_diffuse(x, k, eps, schedule)
    x_v = forward_diffuse(x, v, eps, schedule)
    keys = extract_features(extractor, denoiser, x_k, k, schedule) if len(x) else np.zeros((0, extractor.output_dim))
    labs = np.full(len(src), -1) if labels is None else np.asarray(labels)[src]
    manifest = manifest or KbManifest(seed=seed)
    return KnowledgeBase(keys, x_v, labs, src, k, v, "cosine", manifest)


def _similarities(kb: KnowledgeBase, z: np.ndarray) -> np.ndarray:
    if len(kb) == 0:
        raise ValueError("knowledge base is empty")
    return np.atleast_2d(z) @ kb.keys.T


def query_batch(kb: KnowledgeBase, z: np.ndarray, topk: int = 1):
    """Top-k indices and similarities per query row, ties to lower source index."""
    if topk < 1:
        raise ValueError("topk must be >= 1")
    sims = _similarities(kb, z)
    n, N = sims.shape
    topk = min(topk, N)
    if topk == 1:
        idx = np.argmax(sims, axis=1)[:, None]
        return idx, np.take_along_axis(sims, idx, axis=1)
    idx = np.empty((n, topk), dtype=np.int64)
    for r in range(n):
        row = sims[r]
        if topk < N:
            thresh = np.partition(row, N - topk)[N - topk]
            cand = np.flatnonzero(row >= thresh)
        else:
            cand = np.arange(N)
        order = np.lexsort((kb.source_index[cand], -row[cand]))
        idx[r] = cand[order[:topk]]
    return idx, np.take_along_axis(sims, idx, axis=1)


def query(kb: KnowledgeBase, z: np.ndarray, topk: int = 1) -> list[tuple[KbEntry, float]]:
    idx, sims = query_batch(kb, np.asarray(z, dtype=np.float64)[None, :], topk)
    return [(kb.entry(int(i)), float(s)) for i, s in zip(idx[0], sims[0])]


def retrieval_label_accuracy(kb: KnowledgeBase, features, labels, topk: int = 1) -> float:
    """Fraction of queries whose top-k neighbors include their true label."""
    if np.any(kb.labels < 0):
        raise ValueError("retrieval accuracy needs a fully labeled KB")
    features = np.atleast_2d(features)
    labels = np.asarray(labels)
    if len(features) == 0:
        return 0.0
    idx, _ = query_batch(kb, features, topk)
    hits = np.any(kb.labels[idx] == labels[:, None], axis=1)
    return float(hits.mean())


def kb_to_bytes(kb: KnowledgeBase) -> bytes:
    m = kb.manifest
    parts = [
        _HEADER.pack(
            MAGIC, VERSION, METRICS[kb.metric], kb.k_timestep, kb.v_timestep,
            kb.d_feat, kb.d_data, len(kb),
        ),
        m.denoiser_sha256, m.extractor_sha256, m.schedule_sha256,
        struct.pack("<Q", m.seed),
    ]
    rec = np.dtype(
        [("key", "<f8", (kb.d_feat,)), ("value", "<f8", (kb.d_data,)),
         ("label", "<i4"), ("src", "<u8")]
    )
    arr = np.empty(len(kb), dtype=rec)
    arr["key"], arr["value"] = kb.keys, kb.values
    arr["label"], arr["src"] = kb.labels, kb.source_index
    parts.append(arr.tobytes())
    return b"".join(parts)


def kb_from_bytes(buf: bytes) -> KnowledgeBase:
    if buf[:4] != MAGIC:
        raise ValueError("not an RPKB file")
    _, version, metric, k, v, d_feat, d_data, count = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise ValueError(f"unsupported RPKB version {version}")
    pos = _HEADER.size
    shas = [buf[pos + 32 * i : pos + 32 * (i + 1)] for i in range(3)]
    pos += 96
    (seed,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    rec = np.dtype(
        [("key", "<f8", (d_feat,)), ("value", "<f8", (d_data,)),
         ("label", "<i4"), ("src", "<u8")]
    )
    if len(buf) - pos != rec.itemsize * count:
        raise ValueError("RPKB payload length does not match header")
    arr = np.frombuffer(buf, dtype=rec, count=count, offset=pos)
    name = {v_: k_ for k_, v_ in METRICS.items()}[metric]
    return KnowledgeBase(
        arr["key"].copy(), arr["value"].copy(), arr["label"].copy(), arr["src"].copy(),
        k, v, name, KbManifest(*shas, seed),
    )


def save_kb(kb: KnowledgeBase, path) -> bytes:
    data = kb_to_bytes(kb)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).digest()


def load_kb(path, denoiser_sha=None, extractor_sha=None, schedule_sha=None) -> KnowledgeBase:
    kb = kb_from_bytes(Path(path).read_bytes())
    kb.check_models(denoiser_sha, extractor_sha, schedule_sha)
    return kb
