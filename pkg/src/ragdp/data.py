"""Toy point-cloud datasets standing in for the public/private splits."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROLES = ("pub_pre", "pub_ref", "prv", "syn")
GENERATORS = ("gaussian_ring", "swiss_roll", "checkerboard", "blobs")

_MAGIC = b"RPDS"
_VERSION = 1


@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray | None
    role: str
    generator: str
    generator_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.role not in ROLES:
            raise ValueError(f"unknown dataset role {self.role!r}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32)
            if len(self.labels) != len(self.points):
                raise ValueError("labels and points differ in length")
            if len(self.labels) and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None or not len(self.labels) else int(self.labels.max()) + 1

    def require_role(self, *roles: str) -> "Dataset":
        if self.role not in roles:
            raise ValueError(f"dataset has role {self.role!r}, need one of {roles}")
        return self

    def to_bytes(self) -> bytes:
        params = json.dumps(self.generator_params, sort_keys=True).encode()
        has_labels = self.labels is not None
        head = struct.pack(
            "<4sHBBQIBQI", _MAGIC, _VERSION, ROLES.index(self.role),
            GENERATORS.index(self.generator), len(self), self.dim, has_labels,
            self.seed, len(params),
        )
        body = self.points.astype("<f8").tobytes()
        if has_labels:
            body += self.labels.astype("<i4").tobytes()
        return head + params + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Dataset":
        fmt = struct.Struct("<4sHBBQIBQI")
        magic, version, role, gen, n, dim, has_labels, seed, plen = fmt.unpack_from(buf)
        if magic != _MAGIC or version != _VERSION:
            raise ValueError("not an RPDS v1 file")
        pos = fmt.size
        params = json.loads(buf[pos : pos + plen])
        pos += plen
        pts = np.frombuffer(buf, "<f8", n * dim, pos).reshape(n, dim).copy()
        pos += 8 * n * dim
        labels = np.frombuffer(buf, "<i4", n, pos).copy() if has_labels else None
        return cls(pts, labels, ROLES[role], GENERATORS[gen], params, seed)

    @property
    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())


def _stratified_labels(n: int, n_classes: int) -> np.ndarray:
    return np.arange(n) % n_classes


def _shift(points: np.ndarray, rotation: float, translation) -> np.ndarray:
    if rotation:
        c, s = np.cos(rotation), np.sin(rotation)
        points = points @ np.array([[c, s], [-s, c]])
    if translation is not None:
        points = points + np.asarray(translation, dtype=np.float64)
    return points


def ring_centers(n_modes: int, radius: float, rotation: float = 0.0, translation=None):
    angles = 2 * np.pi * np.arange(n_modes) / n_modes + rotation
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if translation is not None:
        centers = centers + np.asarray(translation, dtype=np.float64)
    return centers


def generate_dataset(
    generator: str, params: dict | None, n: int, seed: int, role: str = "pub_pre"
) -> Dataset:
    """Deterministic toy data. ``rotation``/``translation`` in ``params``
    apply a rigid shift (2-D generators) to model a public/private gap."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}")
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    rotation = float(params.get("rotation", 0.0))
    translation = params.get("translation")
    labels = None
    if generator == "gaussian_ring":
        n_modes = int(params.get("n_modes", 8))
        radius = float(params.get("radius", 2.0))
        std = float(params.get("mode_std", 0.05))
        labels = _stratified_labels(n, n_modes)
        centers = ring_centers(n_modes, radius)
        points = centers[labels] + std * rng.standard_normal((n, 2))
    elif generator == "blobs":
        centers = np.asarray(params.get("centers", [[-1.0, 0.0], [1.0, 0.0]]), dtype=np.float64)
        std = float(params.get("std", 0.1))
        labels = _stratified_labels(n, len(centers))
        points = centers[labels] + std * rng.standard_normal((n, centers.shape[1]))
    elif generator == "swiss_roll":
        noise = float(params.get("noise", 0.05))
        scale = float(params.get("scale", 0.2))
        t = 1.5 * np.pi * (1 + 2 * rng.random(n))
        points = scale * np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
        points += noise * rng.standard_normal((n, 2))
    else:  # checkerboard
        cells = int(params.get("cells", 4))
        size = float(params.get("cell_size", 1.0))
        # Only the "black" cells, (i + j) even.
        black = [(i, j) for i in range(cells) for j in range(cells) if (i + j) % 2 == 0]
        labels = _stratified_labels(n, len(black))
        corner = np.array(black, dtype=np.float64)[labels]
        points = (corner + rng.random((n, 2)) - cells / 2) * size
    if points.shape[1] == 2:
        points = _shift(points, rotation, translation)
    elif translation is not None:
        points = points + np.asarray(translation, dtype=np.float64)
    return Dataset(points, labels, role, generator, params, seed)
