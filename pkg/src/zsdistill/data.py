"""Synthetic noisy image/caption pairs and the EMB1 tensor file format.

EMB1 layout (little endian)::

    magic    4 bytes  b"EMB1"
    version  u16      1
    dtype    u8       0 = float32, 1 = float64
    rows     u64
    cols     u64
    payload  rows * cols values, row-major

Datasets live in a directory: ``images.emb``, ``texts.emb`` and a
``dataset.json`` sidecar with concept sets, names and the generator config.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationError, TruncationError

MAGIC = b"EMB1"
VERSION = 1
_HEADER = struct.Struct("<4sHBQQ")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_TAGS = {"f32": 0, "f64": 1}


def write_tensor(fh, m: np.ndarray, dtype: str = "f32") -> None:
    m = np.asarray(m)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise FormatError(f"EMB1 stores 2-D tensors, got shape {m.shape}")
    tag = DTYPE_TAGS[dtype]
    fh.write(_HEADER.pack(MAGIC, VERSION, tag, m.shape[0], m.shape[1]))
    # astype rounds to nearest-even when narrowing
    fh.write(np.ascontiguousarray(m, dtype=DTYPES[tag]).tobytes())


def read_tensor(fh, what: str = "tensor") -> np.ndarray:
    """Read one EMB1 record; the result keeps its on-disk precision."""
    header = fh.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise TruncationError(f"{what}: header truncated ({len(header)} of {_HEADER.size} bytes)")
    magic, version, tag, rows, cols = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{what}: unsupported EMB1 version {version}, expected {VERSION}")
    if tag not in DTYPES:
        raise FormatError(f"{what}: unknown dtype tag {tag}")
    dt = DTYPES[tag]
    want = rows * cols * dt.itemsize
    payload = fh.read(want)
    if len(payload) != want:
        raise TruncationError(
            f"{what}: header declares {rows}x{cols} values ({want} bytes) but only {len(payload)} bytes follow"
        )
    return np.frombuffer(payload, dtype=dt).reshape(rows, cols).copy()


def save_matrix(path, m: np.ndarray, dtype: str = "f32") -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, m, dtype)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        m = read_tensor(fh, str(path))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return m


@dataclass(frozen=True)
class NoiseConfig:
    concepts_per_image: tuple = (1, 3)
    caption_coverage: float = 1.0
    distractor_rate: float = 0.0
    feature_noise_sigma: float = 0.0

    def __post_init__(self):
        lo, hi = self.concepts_per_image
        if not 1 <= lo <= hi:
            raise GenerationError(f"concepts_per_image must satisfy 1 <= lo <= hi, got {self.concepts_per_image}")
        for name in ("caption_coverage", "distractor_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GenerationError(f"{name} must be a probability, got {v}")
        if self.feature_noise_sigma < 0:
            raise GenerationError(f"feature_noise_sigma must be >= 0, got {self.feature_noise_sigma}")


@dataclass(frozen=True)
class ConceptVocabulary:
    names: tuple
    image_protos: np.ndarray  # C x D_img
    text_protos: np.ndarray  # C x D_txt
    seed: int = 0

    def __len__(self):
        return len(self.names)


def _orthonormal_columns(gen, rows, cols):
    q, r = np.linalg.qr(gen.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def make_vocabulary(size: int, image_dim: int, text_dim: int, seed: int, coupling: str = "shared") -> ConceptVocabulary:
    """Unit-norm prototypes per concept, one per modality.

    Each concept has a latent direction drawn uniformly from the sphere. With
    ``coupling="shared"`` both prototypes are that direction pushed through a
    fixed per-modality map with orthonormal columns, so each modality's
    prototypes are still uniform on its sphere while a single cross-modal
    relation holds for every concept, seen or unseen. ``"independent"``
    draws the two prototype sets separately; nothing then links an unseen
    concept's image to its caption.
    """
    if size < 2:
        raise GenerationError(f"vocabulary needs at least 2 concepts, got {size}")
    if image_dim < 1 or text_dim < 1:
        raise GenerationError(f"feature dims must be positive, got {image_dim}, {text_dim}")
    gen = np.random.default_rng(seed)
    if coupling == "shared":
        latent_dim = min(image_dim, text_dim)
        u = gen.standard_normal((size, latent_dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        protos = [u @ _orthonormal_columns(gen, dim, latent_dim).T for dim in (image_dim, text_dim)]
    elif coupling == "independent":
        protos = []
        for dim in (image_dim, text_dim):
            p = gen.standard_normal((size, dim))
            protos.append(p / np.linalg.norm(p, axis=1, keepdims=True))
    else:
        raise GenerationError(f"unknown prototype coupling {coupling!r}")
    names = tuple(f"concept {i:03d}" for i in range(size))
    return ConceptVocabulary(names, protos[0], protos[1], seed)


@dataclass
class SyntheticPairDataset:
    image_features: np.ndarray
    text_features: np.ndarray
    image_concepts: list  # list of sorted tuples of concept ids
    text_concepts: list
    concept_names: tuple = ()
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image_features.shape[0] != self.text_features.shape[0]:
            raise GenerationError("image and text row counts differ")
        if len(self.image_concepts) != len(self) or len(self.text_concepts) != len(self):
            raise GenerationError("concept lists do not match row count")

    def __len__(self):
        return self.image_features.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.image_features.shape[1], self.text_features.shape[1]

    def truth_names(self) -> list[set]:
        return [{self.concept_names[c] for c in cs} for cs in self.image_concepts]


def sample_pairs(
    vocab: ConceptVocabulary,
    size: int,
    noise: NoiseConfig,
    seed: int,
    pool=None,
) -> SyntheticPairDataset:
    """Draw ``size`` pairs whose concepts all come from ``pool`` (default: all).

    Per pair: the image shows k ~ U{lo..hi} distinct concepts. Each is
    mentioned in the caption with probability ``caption_coverage``; with
    probability ``distractor_rate`` the caption also mentions one concept the
    image lacks. A caption that ends up mentioning nothing keeps one image
    concept at random, so every row references at least one concept.
    Features are prototype sums plus N(0, sigma^2) noise.
    """
    if size < 1:
        raise GenerationError(f"dataset_size must be >= 1, got {size}")
    pool = np.arange(len(vocab)) if pool is None else np.asarray(sorted(pool))
    lo, hi = noise.concepts_per_image
    if hi > len(pool):
        raise GenerationError(f"cannot place {hi} concepts per image with a pool of {len(pool)}")
    gen = np.random.default_rng(seed)
    img_sets, txt_sets = [], []
    for _ in range(size):
        k = int(gen.integers(lo, hi + 1))
        shown = gen.choice(pool, size=k, replace=False)
        kept = [c for c in shown if gen.random() < noise.caption_coverage]
        if gen.random() < noise.distractor_rate:
            absent = np.setdiff1d(pool, shown)
            if absent.size:
                kept.append(gen.choice(absent))
        if not kept:
            kept = [shown[gen.integers(k)]]
        img_sets.append(tuple(sorted(int(c) for c in shown)))
        txt_sets.append(tuple(sorted(int(c) for c in kept)))

    def featurize(sets, protos):
        x = np.zeros((size, protos.shape[1]))
        for i, cs in enumerate(sets):
            x[i] = protos[list(cs)].sum(axis=0)
        if noise.feature_noise_sigma:
            x += noise.feature_noise_sigma * gen.standard_normal(x.shape)
        return x

    images = featurize(img_sets, vocab.image_protos)
    texts = featurize(txt_sets, vocab.text_protos)
    config = {"noise": _noise_dict(noise), "seed": int(seed), "pool": [int(c) for c in pool]}
    return SyntheticPairDataset(images, texts, img_sets, txt_sets, vocab.names, config)


def generate(vocab_size: int, dataset_size: int, dims: tuple[int, int], noise: NoiseConfig, seed: int):
    """One-shot helper: build a vocabulary from ``seed`` and sample pairs from it."""
    vocab = make_vocabulary(vocab_size, dims[0], dims[1], seed)
    return sample_pairs(vocab, dataset_size, noise, seed + 1)


def _noise_dict(noise: NoiseConfig) -> dict:
    d = asdict(noise)
    d["concepts_per_image"] = list(noise.concepts_per_image)
    return d


def save_dataset(ds: SyntheticPairDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_matrix(path / "images.emb", ds.image_features)
    save_matrix(path / "texts.emb", ds.text_features)
    meta = {
        "format": "zsdistill-dataset",
        "rows": len(ds),
        "image_concepts": [list(c) for c in ds.image_concepts],
        "text_concepts": [list(c) for c in ds.text_concepts],
        "concept_names": list(ds.concept_names),
        "config": ds.config,
    }
    _write_json(path / "dataset.json", meta)


def load_dataset(path) -> SyntheticPairDataset:
    """Load a dataset directory; features are widened to float64."""
    path = Path(path)
    images = load_matrix(path / "images.emb")
    texts = load_matrix(path / "texts.emb")
    with open(path / "dataset.json") as fh:
        meta = json.load(fh)
    if meta.get("rows", images.shape[0]) != images.shape[0] or images.shape[0] != texts.shape[0]:
        raise TruncationError(
            f"{path}: sidecar says {meta.get('rows')} rows, images have {images.shape[0]}, texts {texts.shape[0]}"
        )
    return SyntheticPairDataset(
        images.astype(np.float64),
        texts.astype(np.float64),
        [tuple(c) for c in meta["image_concepts"]],
        [tuple(c) for c in meta["text_concepts"]],
        tuple(meta.get("concept_names", ())),
        meta.get("config", {}),
    )


def save_labels(path, features: np.ndarray, names, extra: dict | None = None) -> None:
    """Label features as ``<path>.emb`` plus ``<path>.json`` holding the names."""
    path = Path(path)
    save_matrix(path.with_suffix(".emb"), features)
    _write_json(path.with_suffix(".json"), {"labels": list(names), **(extra or {})})


def load_labels(path) -> tuple[np.ndarray, list, dict]:
    path = Path(path)
    features = load_matrix(path.with_suffix(".emb")).astype(np.float64)
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    names = meta.pop("labels")
    if len(names) != features.shape[0]:
        raise TruncationError(f"{path}: {len(names)} names for {features.shape[0]} feature rows")
    return features, names, meta


def _write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def epoch_indices(size: int, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    """Seeded permutation of ``range(size)`` cut into full batches; the ragged tail is dropped."""
    if not 1 <= batch_size <= size:
        raise GenerationError(f"batch_size {batch_size} must lie in [1, {size}]")
    perm = np.random.default_rng(epoch_seed).permutation(size)
    n = size // batch_size
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n)]


def epoch_batches(ds: SyntheticPairDataset, batch_size: int, epoch_seed: int):
    return [(ds.image_features[idx], ds.text_features[idx]) for idx in epoch_indices(len(ds), batch_size, epoch_seed)]


@dataclass
class ExperimentData:
    vocab: ConceptVocabulary
    train: SyntheticPairDataset
    eval_heldin: SyntheticPairDataset
    eval_heldout: SyntheticPairDataset | None
    heldout: tuple


def build_splits(
    vocab_size: int,
    image_dim: int,
    text_dim: int,
    train_size: int,
    eval_size: int,
    noise: NoiseConfig,
    holdout_fraction: float = 0.0,
    seed: int = 0,
    coupling: str = "shared",
) -> ExperimentData:
    """Training pairs over held-in concepts plus eval images for held-in and held-out concepts.

    Held-out concepts never appear in training images or captions (distractors
    included), so their eval images measure transfer to unseen classes.
    """
    from .seeding import derive_seed, rng

    if not 0.0 <= holdout_fraction < 1.0:
        raise GenerationError(f"holdout_fraction must lie in [0, 1), got {holdout_fraction}")
    vocab = make_vocabulary(vocab_size, image_dim, text_dim, derive_seed(seed, "vocab"), coupling)
    n_out = int(round(holdout_fraction * vocab_size))
    heldout = tuple(sorted(int(c) for c in rng(seed, "holdout").choice(vocab_size, n_out, replace=False)))
    heldin = tuple(c for c in range(vocab_size) if c not in set(heldout))
    train = sample_pairs(vocab, train_size, noise, derive_seed(seed, "train"), heldin)
    ev_in = sample_pairs(vocab, eval_size, noise, derive_seed(seed, "eval/heldin"), heldin)
    ev_out = None
    if heldout:
        ev_out = sample_pairs(vocab, eval_size, noise, derive_seed(seed, "eval/heldout"), heldout)
    return ExperimentData(vocab, train, ev_in, ev_out, heldout)
