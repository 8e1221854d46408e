"""Procedural multi-domain datasets, episode sampling, and file ingestion.

Every sample is rendered in two steps: a class-specific pattern drawn from a
per-(class, sample) substream, then a domain transform (channel mixing, gain,
offset, background texture, additive noise) drawn from a per-domain substream.
The same sample index therefore yields paired renders across domains, which
makes domain-shift magnitudes directly measurable.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .encoder import ConfigError
from .heads import Episode
from .rng import Rng
from .tensor import Tensor
from .tensor_io import load_tensor_file, save_tensor_file


class DataError(ValueError):
    """Dataset construction or ingestion failure with source context."""


FAMILIES = ("blob", "stripe", "ring", "checker")


@dataclass
class ClassSpec:
    """Deterministic parametric texture family for one class."""
    class_id: int
    family: str
    orientation: float = 0.0
    scale: float = 1.0
    frequency: float = 2.0
    color: tuple[float, float, float] = (1.0, 0.8, 0.6)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown shape family {self.family!r}")
        if not (0.2 <= self.scale <= 3.0) or not (0.5 <= self.frequency <= 8.0):
            raise DataError(
                f"class {self.class_id}: scale/frequency outside generator bounds")

    def to_dict(self) -> dict:
        return {"id": self.class_id, "family": self.family,
                "orientation": self.orientation, "scale": self.scale,
                "frequency": self.frequency, "color": list(self.color)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSpec":
        return cls(d["id"], d["family"], d["orientation"], d["scale"],
                   d["frequency"], tuple(d["color"]))


@dataclass
class DomainSpec:
    """Observation transform of one domain."""
    domain_id: int
    mixing: np.ndarray = field(default_factory=lambda: np.eye(3))
    gain: np.ndarray = field(default_factory=lambda: np.ones(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    noise_std: float = 0.0
    texture_freq: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.mixing = np.asarray(self.mixing, dtype=np.float64)
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if self.mixing.shape != (3, 3) or abs(np.linalg.det(self.mixing)) < 1e-3:
            raise DataError(
                f"domain {self.domain_id}: mixing matrix must be 3x3 and nonsingular")
        if self.noise_std < 0:
            raise DataError(f"domain {self.domain_id}: negative noise std")

    def to_dict(self) -> dict:
        return {"id": self.domain_id, "mixing": self.mixing.tolist(),
                "gain": self.gain.tolist(), "offset": self.offset.tolist(),
                "noise_std": self.noise_std, "texture_freq": self.texture_freq,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(d["id"], np.array(d["mixing"]), np.array(d["gain"]),
                   np.array(d["offset"]), d["noise_std"], d["texture_freq"],
                   d["seed"])


def render_pattern(spec: ClassSpec, rng: Rng, h: int = 16, w: int = 16) -> np.ndarray:
    """Class pattern on a 3-channel grid with per-sample jitter; domain-free."""
    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    dx, dy = rng.uniform(-0.25, 0.25, (2,))
    theta = spec.orientation + rng.uniform(-0.25, 0.25)
    s = spec.scale * rng.uniform(0.85, 1.15)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    u = (xs - dx) * np.cos(theta) + (ys - dy) * np.sin(theta)
    v = -(xs - dx) * np.sin(theta) + (ys - dy) * np.cos(theta)
    r2 = u * u + v * v
    if spec.family == "blob":
        value = np.exp(-r2 / (2.0 * (0.35 * s) ** 2))
    elif spec.family == "stripe":
        value = 0.5 + 0.5 * np.sin(2.0 * np.pi * spec.frequency * u / s + phase)
    elif spec.family == "ring":
        radius = 0.55 * s
        value = np.exp(-((np.sqrt(r2) - radius) ** 2) / (2.0 * 0.08 ** 2))
    else:  # checker
        value = 0.5 + 0.5 * np.sin(2.0 * np.pi * spec.frequency * u / s) \
            * np.sin(2.0 * np.pi * spec.frequency * v / s)
    color = np.asarray(spec.color)
    return value[None, :, :] * color[:, None, None]


def apply_domain(img: np.ndarray, dom: DomainSpec, rng: Rng) -> np.ndarray:
    """Channel mixing, gain/offset, background texture, and additive noise."""
    c, h, w = img.shape
    out = np.einsum("ij,jhw->ihw", dom.mixing, img)
    out = out * dom.gain[:, None, None] + dom.offset[:, None, None]
    if dom.texture_freq > 0.0:
        ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
        phase = rng.uniform(0.0, 2.0 * np.pi)
        tex = 0.1 * np.sin(2.0 * np.pi * dom.texture_freq * (xs + ys) + phase)
        out = out + tex[None, :, :]
    if dom.noise_std > 0.0:
        out = out + dom.noise_std * rng.normal(0.0, 1.0, out.shape)
    return out


def render_sample(spec: ClassSpec, dom: DomainSpec, sample_idx: int,
                  root: Rng, h: int = 16, w: int = 16) -> np.ndarray:
    """One finished sample; the pattern substream is shared across domains."""
    pattern = render_pattern(spec, root.substream("pattern", spec.class_id, sample_idx), h, w)
    noise_rng = root.substream("domain", dom.domain_id, dom.seed,
                               spec.class_id, sample_idx)
    return apply_domain(pattern, dom, noise_rng)


class DatasetManifest:
    """Index of the on-disk dataset: class/domain specs and per-cell tensor files."""

    def __init__(self, root: Path, image_shape: tuple[int, int, int],
                 classes: list[ClassSpec], domains: list[DomainSpec],
                 cells: dict, seed: int,
                 class_names: Optional[dict] = None,
                 domain_names: Optional[dict] = None):
        self.root = Path(root)
        self.image_shape = tuple(image_shape)
        self.classes = classes
        self.domains = domains
        self.cells = cells  # {class_id: {domain_id: {"path", "count"}}}
        self.seed = seed
        self.class_names = class_names or {}
        self.domain_names = domain_names or {}
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    def domain_ids(self) -> list[int]:
        return [d.domain_id for d in self.domains]

    def cell(self, class_id: int, domain_id: int) -> dict:
        try:
            return self.cells[class_id][domain_id]
        except KeyError:
            raise DataError(f"no cell for class {class_id}, domain {domain_id}") from None

    def cell_count(self, class_id: int, domain_id: int) -> int:
        return self.cell(class_id, domain_id)["count"]

    def load_cell(self, class_id: int, domain_id: int) -> np.ndarray:
        key = (class_id, domain_id)
        if key not in self._cache:
            info = self.cell(class_id, domain_id)
            path = self.root / info["path"]
            arr = load_tensor_file(path).data
            expected = (info["count"], *self.image_shape)
            if arr.shape != expected:
                raise DataError(
                    f"{path}: shape {arr.shape} does not match manifest {expected}")
            self._cache[key] = arr
        return self._cache[key]

    def save(self, path: Optional[Path] = None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        doc = {
            "format": "afa-dataset",
            "version": 1,
            "image_shape": list(self.image_shape),
            "seed": self.seed,
            "classes": [c.to_dict() for c in self.classes],
            "domains": [d.to_dict() for d in self.domains],
            "cells": {str(cid): {str(did): info for did, info in row.items()}
                      for cid, row in self.cells.items()},
            "class_names": self.class_names,
            "domain_names": self.domain_names,
        }
        path.write_text(json.dumps(doc, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise DataError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as err:
            raise DataError(f"{path}: invalid JSON ({err})") from None
        if doc.get("format") != "afa-dataset":
            raise DataError(f"{path}: not a dataset manifest")
        cells = {int(cid): {int(did): info for did, info in row.items()}
                 for cid, row in doc["cells"].items()}
        manifest = cls(path.parent, tuple(doc["image_shape"]),
                       [ClassSpec.from_dict(c) for c in doc["classes"]],
                       [DomainSpec.from_dict(d) for d in doc["domains"]],
                       cells, doc["seed"], doc.get("class_names"),
                       doc.get("domain_names"))
        for cid, row in manifest.cells.items():
            for did, info in row.items():
                f = manifest.root / info["path"]
                if not f.exists():
                    raise DataError(f"manifest references missing file {f}")
        return manifest


def gen_synthetic(classes: list[ClassSpec], domains: list[DomainSpec],
                  samples_per_cell: int, rng: Rng, out_dir) -> DatasetManifest:
    """Render every (class, domain) cell to a tensor file and write the manifest."""
    if len(classes) < 10:
        raise DataError(f"need at least 10 classes for a base/novel split, got {len(classes)}")
    if len(domains) < 2:
        raise DataError(f"need at least 2 domains, got {len(domains)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = w = 16
    cells: dict[int, dict[int, dict]] = {}
    for spec in classes:
        cells[spec.class_id] = {}
        for dom in domains:
            batch = np.stack([render_sample(spec, dom, i, rng, h, w)
                              for i in range(samples_per_cell)])
            rel = f"c{spec.class_id}_d{dom.domain_id}.afat"
            try:
                save_tensor_file(out_dir / rel, Tensor(batch))
            except OSError as err:
                raise DataError(f"cannot write {out_dir / rel}: {err}") from None
            cells[spec.class_id][dom.domain_id] = {"path": rel, "count": samples_per_cell}
    manifest = DatasetManifest(out_dir, (3, h, w), classes, domains, cells, rng.seed)
    manifest.save()
    return manifest


def split_base_novel(manifest: DatasetManifest, n_base: int) -> tuple[list[int], list[int]]:
    """Deterministic disjoint split by class id order."""
    ids = sorted(manifest.class_ids())
    if not (1 <= n_base < len(ids)):
        raise ConfigError(f"n_base must lie in [1, {len(ids)}), got {n_base}")
    return ids[:n_base], ids[n_base:]


def sample_episode_indices(manifest: DatasetManifest, pool: list[int],
                           domain_id: int, n: int, k: int, q: int,
                           rng: Rng) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Pick n classes and disjoint support/query sample indices per class."""
    if len(pool) < n:
        raise DataError(f"pool has {len(pool)} classes, episode needs {n}")
    chosen = [pool[i] for i in rng.choice(len(pool), n, replace=False)]
    out = []
    for cid in chosen:
        count = manifest.cell_count(cid, domain_id)
        if count < k + q:
            raise DataError(
                f"class {cid} has {count} samples in domain {domain_id}, "
                f"episode needs k+q={k + q}")
        idx = rng.choice(count, k + q, replace=False)
        out.append((cid, idx[:k], idx[k:]))
    return out


def sample_episode(manifest: DatasetManifest, pool: list[int], domain_id: int,
                   n: int, k: int, q: int, rng: Rng) -> Episode:
    """One n-way k-shot episode of raw images from a single domain."""
    picks = sample_episode_indices(manifest, pool, domain_id, n, k, q, rng)
    sup, qry = [], []
    for cid, sup_idx, qry_idx in picks:
        cell = manifest.load_cell(cid, domain_id)
        sup.append(cell[sup_idx])
        qry.append(cell[qry_idx])
    support_y = np.repeat(np.arange(n), k)
    query_y = np.repeat(np.arange(n), q)
    return Episode(np.concatenate(sup), support_y, np.concatenate(qry), query_y, n, k, q)


def ingest_csv(path, feature_cols: list[str], label_col: str, domain_col: str,
               out_dir) -> DatasetManifest:
    """Build a vector-mode dataset (H = W = 1) from a rectangular CSV file."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in feature_cols + [label_col, domain_col] if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        col_idx = {c: header.index(c) for c in header}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: ragged row ({len(row)} of {len(header)} cells)")
            try:
                feats = [float(row[col_idx[c]]) for c in feature_cols]
            except ValueError as err:
                raise DataError(f"{path}:{lineno}: non-numeric feature ({err})") from None
            rows.append((feats, row[col_idx[label_col]], row[col_idx[domain_col]]))
    if not rows:
        raise DataError(f"{path}: no data rows, manifest would be empty")

    labels = sorted({r[1] for r in rows})
    domains = sorted({r[2] for r in rows})
    label_ids = {name: i for i, name in enumerate(labels)}
    domain_ids = {name: i for i, name in enumerate(domains)}
    c = len(feature_cols)
    grouped: dict[tuple[int, int], list] = {}
    for feats, lab, dom in rows:
        grouped.setdefault((label_ids[lab], domain_ids[dom]), []).append(feats)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells: dict[int, dict[int, dict]] = {}
    for (cid, did), feats in sorted(grouped.items()):
        arr = np.asarray(feats, dtype=np.float64).reshape(len(feats), c, 1, 1)
        rel = f"c{cid}_d{did}.afat"
        save_tensor_file(out_dir / rel, Tensor(arr))
        cells.setdefault(cid, {})[did] = {"path": rel, "count": len(feats)}

    class_specs = [ClassSpec(cid, "blob") for cid in range(len(labels))]
    domain_specs = [DomainSpec(did, seed=0) for did in range(len(domains))]
    manifest = DatasetManifest(out_dir, (c, 1, 1), class_specs, domain_specs,
                               cells, 0,
                               class_names={str(i): name for name, i in label_ids.items()},
                               domain_names={str(i): name for name, i in domain_ids.items()})
    manifest.save()
    return manifest


def default_benchmark(n_classes: int = 12) -> tuple[list[ClassSpec], list[DomainSpec]]:
    """Benchmark classes and 3 domains of growing shift.

    12 classes by default (6 base / 6 novel downstream) so that 5-way episodes
    can be sampled from the novel pool.
    """
    classes = []
    for cid in range(n_classes):
        family = FAMILIES[cid % 4]
        color = (0.4 + 0.6 * ((cid * 7) % 10) / 9.0,
                 0.4 + 0.6 * ((cid * 3) % 10) / 9.0,
                 0.4 + 0.6 * ((cid * 9 + 5) % 10) / 9.0)
        classes.append(ClassSpec(cid, family, orientation=0.31 * cid,
                                 scale=0.8 + 0.1 * (cid % 4),
                                 frequency=1.5 + 0.5 * (cid % 5), color=color))
    near_mix = np.array([[0.9, 0.1, 0.0], [0.05, 0.9, 0.05], [0.0, 0.1, 0.9]])
    far_mix = np.array([[0.6, 0.3, 0.1], [0.2, 0.6, 0.2], [0.1, 0.3, 0.6]])
    domains = [
        DomainSpec(0, np.eye(3), np.ones(3), np.zeros(3),
                   noise_std=0.02, texture_freq=0.0, seed=11),
        DomainSpec(1, near_mix, np.array([1.15, 0.9, 1.05]),
                   np.array([0.05, -0.08, 0.03]), noise_std=0.06,
                   texture_freq=2.0, seed=22),
        DomainSpec(2, far_mix, np.array([1.5, 0.6, 1.25]),
                   np.array([0.25, -0.2, 0.15]), noise_std=0.12,
                   texture_freq=4.0, seed=33),
    ]
    return classes, domains
