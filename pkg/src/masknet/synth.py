"""Synthetic "accented utterance" corpus.

Each token is rendered as ``frames_per_token`` copies of a unit-norm
prototype. An accent applies a near-identity mixing matrix to those
content channels and writes a constant offset into extra nuisance
channels appended after them. Accent 0 is the identity channel. Held-out
accents appear only in the ``test_ood`` split.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, CorruptionError, FormatError, GenerationError

SPLITS = ("train", "test_in", "test_ood")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}

ARRAY_MAGIC = b"MNFA"
ARRAY_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, F, T
MANIFEST = "manifest.tsv"


@dataclass(frozen=True)
class DataConfig:
    vocab_size: int = 8
    feature_bins: int = 16
    nuisance_channels: int = 4
    frames_per_token: int = 4
    num_accents: int = 6
    held_out_accents: tuple = (4, 5)
    min_length: int = 3
    max_length: int = 6
    noise_std: float = 0.05
    mixing_scale: float = 0.3
    offset_scale: float = 1.0
    max_template_cosine: float = 0.8
    train_count: int = 2000
    test_in_count: int = 300
    test_ood_count: int = 300
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "held_out_accents", tuple(int(a) for a in self.held_out_accents))
        held = set(self.held_out_accents)
        if not held or len(held) >= self.num_accents or not held <= set(range(self.num_accents)):
            raise ContractError(
                f"held_out_accents {self.held_out_accents} must be a nonempty proper subset of "
                f"range({self.num_accents})"
            )
        if 0 in held:
            raise ContractError("accent 0 is the identity reference and cannot be held out")
        if self.min_length < 1 or self.max_length < self.min_length:
            raise ContractError(f"bad length range [{self.min_length}, {self.max_length}]")
        if self.noise_std < 0:
            raise ContractError("noise_std must be >= 0")
        if self.frames_per_token < 1 or self.feature_bins < 1 or self.nuisance_channels < 0:
            raise ContractError("frames_per_token and feature_bins must be >= 1")
        for name in ("train_count", "test_in_count", "test_ood_count"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")

    @property
    def input_features(self):
        return self.feature_bins + self.nuisance_channels

    @property
    def seen_accents(self):
        return tuple(a for a in range(self.num_accents) if a not in self.held_out_accents)

    def count(self, split):
        return getattr(self, f"{split}_count")


@dataclass
class Example:
    id: str
    split: str
    features: np.ndarray  # [F, T] float32
    tokens: tuple
    accent: int


@dataclass
class Dataset:
    splits: dict = field(default_factory=dict)
    config: DataConfig = None

    def __getitem__(self, split):
        if split not in self.splits:
            raise ContractError(f"dataset has no split {split!r}; available: {sorted(self.splits)}")
        return self.splits[split]

    def __eq__(self, other):
        if not isinstance(other, Dataset) or list(self.splits) != list(other.splits):
            return False
        for name, exs in self.splits.items():
            theirs = other.splits[name]
            if len(exs) != len(theirs):
                return False
            for a, b in zip(exs, theirs):
                if (a.id, a.split, a.tokens, a.accent) != (b.id, b.split, b.tokens, b.accent):
                    return False
                if a.features.dtype != b.features.dtype or a.features.tobytes() != b.features.tobytes():
                    return False
        return True

    def __len__(self):
        return sum(len(v) for v in self.splits.values())


def _stream(seed, *key):
    # counter-based generator keyed by (seed, purpose, ...): no shared state
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def make_templates(cfg: DataConfig, max_tries=10_000):
    """``V`` unit-norm prototypes, pairwise cosine at most ``max_template_cosine``."""
    if cfg.vocab_size < 2:
        raise ContractError("need vocab_size >= 2 for distinguishable templates")
    rng = _stream(cfg.seed, 101)
    out = []
    tries = 0
    while len(out) < cfg.vocab_size:
        tries += 1
        if tries > max_tries:
            raise GenerationError(
                f"could not place {cfg.vocab_size} prototypes with cosine <= {cfg.max_template_cosine} "
                f"in {cfg.feature_bins} dims; increase feature_bins"
            )
        v = rng.standard_normal(cfg.feature_bins)
        v /= np.linalg.norm(v)
        if all(float(v @ u) <= cfg.max_template_cosine for u in out):
            out.append(v)
    return np.array(out)


def accent_transforms(cfg: DataConfig):
    """Per-accent (mixing [F, F], offset [nuisance_channels]); accent 0 is identity."""
    F = cfg.feature_bins
    out = [(np.eye(F), np.zeros(cfg.nuisance_channels))]
    for k in range(1, cfg.num_accents):
        rng = _stream(cfg.seed, 202, k)
        for _ in range(100):
            A = np.eye(F) + cfg.mixing_scale * rng.standard_normal((F, F)) / np.sqrt(F)
            if np.linalg.cond(A) < 1e3:
                break
        else:
            raise GenerationError(f"accent {k}: no well-conditioned mixing matrix; lower mixing_scale")
        offset = cfg.offset_scale * rng.standard_normal(cfg.nuisance_channels)
        out.append((A, offset))
    return out


def render_example(tokens, accent, cfg, rng, templates=None, transforms=None, id="", split=""):
    if templates is None:
        templates = make_templates(cfg)
    if transforms is None:
        transforms = accent_transforms(cfg)
    tokens = tuple(int(t) for t in tokens)
    if any(not 0 <= t < cfg.vocab_size for t in tokens):
        raise ContractError(f"tokens must lie in [0, {cfg.vocab_size})")
    if not 0 <= accent < cfg.num_accents:
        raise ContractError(f"accent {accent} outside [0, {cfg.num_accents})")
    A, offset = transforms[accent]
    content = np.repeat(templates[list(tokens)], cfg.frames_per_token, axis=0) @ A.T  # [T, F]
    T = content.shape[0]
    nuisance = np.broadcast_to(offset, (T, cfg.nuisance_channels))
    frames = np.concatenate([content, nuisance], axis=1)
    if cfg.noise_std > 0:
        frames = frames + cfg.noise_std * rng.standard_normal(frames.shape)
    return Example(id, split, np.ascontiguousarray(frames.T, dtype=np.float32), tokens, int(accent))


def build_dataset(cfg: DataConfig):
    """All three splits, a pure function of ``cfg``."""
    templates = make_templates(cfg)
    transforms = accent_transforms(cfg)
    ds = Dataset(config=cfg)
    for split in SPLITS:
        allowed = cfg.held_out_accents if split == "test_ood" else cfg.seen_accents
        exs = []
        for i in range(cfg.count(split)):
            rng = _stream(cfg.seed, 303, _SPLIT_CODE[split], i)
            L = int(rng.integers(cfg.min_length, cfg.max_length + 1))
            tokens = rng.integers(0, cfg.vocab_size, L)
            accent = int(allowed[rng.integers(len(allowed))])
            exs.append(render_example(tokens, accent, cfg, rng, templates, transforms, f"{split}-{i:06d}", split))
        ds.splits[split] = exs
    return ds


# ---------------------------------------------------------------- storage


def _write_array(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ARRAY_MAGIC, ARRAY_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def _read_array(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    magic, version, F, T = _HEADER.unpack_from(blob)
    if magic != ARRAY_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != ARRAY_VERSION:
        raise FormatError(f"{path}: unsupported array version {version}")
    body = blob[_HEADER.size :]
    if len(body) != 4 * F * T:
        raise CorruptionError(f"{path}: expected {4 * F * T} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(F, T).astype(np.float32)


def save_dataset(ds: Dataset, path):
    os.makedirs(os.path.join(path, "arrays"), exist_ok=True)
    lines = ["# id\tsplit\taccent\ttokens\tarray_path"]
    for split, exs in ds.splits.items():
        for ex in exs:
            rel = f"arrays/{ex.id}.f32"
            _write_array(os.path.join(path, rel), ex.features)
            lines.append("\t".join([ex.id, split, str(ex.accent), " ".join(map(str, ex.tokens)), rel]))
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if ds.config is not None:
        from .config import dump_config

        with open(os.path.join(path, "data.cfg"), "w", encoding="utf-8") as fh:
            fh.write(dump_config({"data": ds.config}))


def load_dataset(path):
    manifest = os.path.join(path, MANIFEST)
    if not os.path.exists(manifest):
        raise FormatError(f"{path}: no {MANIFEST}")
    splits = {}
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise FormatError(f"{manifest}:{lineno}: expected 5 tab-separated fields")
            ex_id, split, accent, tokens, rel = fields
            feats = _read_array(os.path.join(path, rel))
            toks = tuple(int(t) for t in tokens.split()) if tokens else ()
            splits.setdefault(split, []).append(Example(ex_id, split, feats, toks, int(accent)))
    cfg = None
    cfg_path = os.path.join(path, "data.cfg")
    if os.path.exists(cfg_path):
        from .config import parse_data_config

        with open(cfg_path, encoding="utf-8") as fh:
            cfg = parse_data_config(fh.read())
    return Dataset(splits=splits, config=cfg)
