"""Synthetic corpus generation, corpus/vocab loading, checkpoints, CSV.

Corpus files are JSON lines, one record per line with fields:
    id        string
    features  K x N nested float arrays (region feature vectors)
    paragraph whitespace-tokenized string

Paragraphs come from a small probabilistic grammar whose word choices are
tied to latent per-region attributes (object, color, size); the region
features embed the same attributes plus seeded noise, so the reward signal
is genuinely predictable from the features. The attribute embedding tables
are part of the grammar definition (fixed internal seed); the grammar seed
drives attribute/sentence sampling and the feature seed only the noise.

Checkpoints are binary: magic "OPCK", u32 version, u32 crc32 of payload,
then length-prefixed JSON config, JSON rng state, and named float64 entries
(little-endian), giving bit-exact round trips.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .numkit import Tensor
from .policies import BehaviourPolicy, TransformerPolicy, Vocabulary


class DataError(ValueError):
    """Schema or value problem in an input file."""


class IntegrityError(DataError):
    """Checkpoint bytes do not parse back to what was written."""


class VersionError(DataError):
    """Checkpoint format version not recognized."""


# ---------------------------------------------------------------------------
# toy grammar
# ---------------------------------------------------------------------------

OBJECTS = ["cat", "dog", "bird", "horse", "tree", "house", "car", "boat",
           "river", "hill", "road", "field", "fence", "tower", "bridge",
           "garden", "truck", "lamp"]
COLORS = ["red", "blue", "green", "white", "black", "brown", "grey", "golden"]
SIZES = ["small", "big", "tall", "tiny", "wide"]
VERBS = ["sits", "runs", "stands", "waits", "moves", "rests", "sleeps",
         "walks", "turns", "leans"]
PREPS = ["near", "beside", "under", "above", "behind", "past", "along",
         "around"]
ADVERBS = ["quietly", "slowly", "calmly", "often", "alone", "there",
           "gently", "nearby"]
STRUCTURE = ["the", "a", "."]

ALL_WORDS = OBJECTS + COLORS + SIZES + VERBS + PREPS + ADVERBS + STRUCTURE

NUM_REGIONS = 8
FEATURE_DIM = 64
FEATURE_NOISE = 0.1
_TABLE_SEED = 20240613  # embedding tables are part of the grammar itself


@dataclass
class CorpusRecord:
    id: str
    features: np.ndarray  # [K x N]
    paragraph: str

    @property
    def tokens(self) -> list[str]:
        return self.paragraph.split()


def _attribute_tables():
    rng = np.random.default_rng(_TABLE_SEED)
    scale = 1.0 / np.sqrt(3.0)
    return {
        "object": rng.normal(0, scale, (len(OBJECTS), FEATURE_DIM)),
        "color": rng.normal(0, scale, (len(COLORS), FEATURE_DIM)),
        "size": rng.normal(0, scale, (len(SIZES), FEATURE_DIM)),
    }


def generate_toy_corpus(n_records: int, grammar_seed: int,
                        feature_seed: int) -> list[CorpusRecord]:
    """Deterministic synthetic image-paragraph pairs (12-24 tokens each)."""
    if n_records < 1:
        raise DataError("n_records must be >= 1")
    tables = _attribute_tables()
    g_rng = np.random.default_rng(grammar_seed)
    f_rng = np.random.default_rng(feature_seed)
    records = []
    for idx in range(n_records):
        objs = g_rng.integers(0, len(OBJECTS), NUM_REGIONS)
        cols = g_rng.integers(0, len(COLORS), NUM_REGIONS)
        sizes = g_rng.integers(0, len(SIZES), NUM_REGIONS)
        n_sent = int(g_rng.integers(2, 4))
        words: list[str] = []
        for j in range(n_sent):
            template = int(g_rng.integers(0, 2))
            obj = OBJECTS[objs[j]]
            if template == 0:
                words += ["the", COLORS[cols[j]], obj,
                          VERBS[g_rng.integers(0, len(VERBS))],
                          ADVERBS[g_rng.integers(0, len(ADVERBS))], "."]
            else:
                obj2 = OBJECTS[objs[j + n_sent]]
                words += ["a", SIZES[sizes[j]], obj,
                          VERBS[g_rng.integers(0, len(VERBS))],
                          PREPS[g_rng.integers(0, len(PREPS))],
                          "the", obj2, "."]
        feats = (tables["object"][objs] + tables["color"][cols]
                 + tables["size"][sizes]
                 + FEATURE_NOISE * f_rng.normal(size=(NUM_REGIONS, FEATURE_DIM)))
        records.append(CorpusRecord(id=f"rec{idx:05d}", features=feats,
                                    paragraph=" ".join(words)))
    return records


def write_corpus(records: Sequence[CorpusRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"id": rec.id,
                   "features": [[float(x) for x in row] for row in rec.features],
                   "paragraph": rec.paragraph}
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_corpus(path) -> list[CorpusRecord]:
    """Parse and validate one JSONL corpus file; never drops or reorders."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    records: list[CorpusRecord] = []
    shape: tuple[int, int] | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            for field in ("id", "features", "paragraph"):
                if field not in obj:
                    raise DataError(f"{path}:{lineno}: missing field {field!r}")
            feats = np.asarray(obj["features"], dtype=np.float64)
            if feats.ndim != 2:
                raise DataError(f"{path}:{lineno}: features must be a K x N array")
            if shape is None:
                shape = feats.shape
            elif feats.shape != shape:
                raise DataError(
                    f"{path}:{lineno}: inconsistent feature shape "
                    f"{feats.shape}, expected {shape}")
            if not np.isfinite(feats).all():
                raise DataError(f"{path}:{lineno}: non-finite feature values")
            paragraph = obj["paragraph"]
            if not isinstance(paragraph, str) or not paragraph.split():
                raise DataError(f"{path}:{lineno}: empty paragraph")
            records.append(CorpusRecord(id=str(obj["id"]), features=feats,
                                        paragraph=paragraph))
    if not records:
        raise DataError(f"{path}: no records")
    return records


def build_vocabulary(records: Sequence[CorpusRecord]) -> Vocabulary:
    """Vocabulary over all tokens present (min frequency 1), sorted."""
    tokens = sorted({t for rec in records for t in rec.tokens})
    return Vocabulary(tokens)


SPLIT_FILES = {"train": "train.jsonl", "val": "val.jsonl", "test": "test.jsonl"}


def write_dataset(out_dir, n_train: int, n_val: int, n_test: int,
                  seed: int) -> dict[str, Path]:
    """Three split files under out_dir, all derived from one seed."""
    out_dir = Path(out_dir)
    children = np.random.SeedSequence(seed).spawn(3)
    paths = {}
    for child, (split, count) in zip(children,
                                     [("train", n_train), ("val", n_val),
                                      ("test", n_test)]):
        g_seed, f_seed = (int(s.generate_state(1)[0]) for s in child.spawn(2))
        records = generate_toy_corpus(count, g_seed, f_seed)
        path = out_dir / SPLIT_FILES[split]
        write_corpus(records, path)
        paths[split] = path
    return paths


def load_dataset(data_dir):
    """Load train/val/test splits; vocabulary comes from train only."""
    data_dir = Path(data_dir)
    splits = {}
    for split, fname in SPLIT_FILES.items():
        p = data_dir / fname
        if p.exists():
            splits[split] = load_corpus(p)
    if "train" not in splits:
        raise DataError(f"{data_dir}: no train split ({SPLIT_FILES['train']})")
    return splits, build_vocabulary(splits["train"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"OPCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    params: dict[str, np.ndarray]
    config: dict
    rng_state: dict | None


def save_checkpoint(path, params: Mapping[str, np.ndarray | Tensor],
                    config: dict, rng_state: dict | None = None) -> None:
    chunks = []

    def put_block(data: bytes):
        chunks.append(struct.pack("<I", len(data)))
        chunks.append(data)

    put_block(json.dumps(config, sort_keys=True).encode("utf-8"))
    put_block(json.dumps(rng_state, sort_keys=True).encode("utf-8")
              if rng_state is not None else b"")
    chunks.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.ascontiguousarray(
            value.data if isinstance(value, Tensor) else value,
            dtype=np.float64)
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    payload = b"".join(chunks)
    header = MAGIC + struct.pack("<II", CHECKPOINT_VERSION,
                                 zlib.crc32(payload))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    version, crc = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"{path}: checkpoint version {version} not supported "
            f"(expected {CHECKPOINT_VERSION})")
    payload = raw[12:]
    if zlib.crc32(payload) != crc:
        raise IntegrityError(f"{path}: checksum mismatch (corrupt or tampered)")
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(payload):
            raise IntegrityError(f"{path}: truncated checkpoint")
        out = payload[pos:pos + n]
        pos += n
        return out

    def take_block() -> bytes:
        (n,) = struct.unpack("<I", take(4))
        return take(n)

    config = json.loads(take_block().decode("utf-8"))
    rng_raw = take_block()
    rng_state = json.loads(rng_raw.decode("utf-8")) if rng_raw else None
    (n_entries,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        params[name] = arr
    if pos != len(payload):
        raise IntegrityError(f"{path}: {len(payload) - pos} trailing bytes")
    return Checkpoint(version=version, params=params, config=config,
                      rng_state=rng_state)


def save_policy(path, policy, extra_config: dict | None = None,
                vocab: Vocabulary | None = None,
                rng_state: dict | None = None) -> None:
    config = {"model": policy.config()}
    if vocab is not None:
        config["vocab_tokens"] = vocab.tokens[4:]
    if extra_config:
        config.update(extra_config)
    save_checkpoint(path, policy.parameters(), config, rng_state)


def load_policy(path):
    """Rebuild a policy (and its vocabulary, if stored) from a checkpoint."""
    ckpt = load_checkpoint(path)
    model_cfg = dict(ckpt.config["model"])
    kind = model_cfg.pop("kind")
    if kind == "behaviour":
        policy = BehaviourPolicy(**model_cfg)
    elif kind == "target":
        policy = TransformerPolicy(**model_cfg)
    else:
        raise DataError(f"{path}: unknown policy kind {kind!r}")
    params = policy.parameters()
    if set(params) != set(ckpt.params):
        raise IntegrityError(f"{path}: parameter names do not match the model")
    for name, tensor in params.items():
        if tensor.data.shape != ckpt.params[name].shape:
            raise IntegrityError(
                f"{path}: shape mismatch for {name}: "
                f"{ckpt.params[name].shape} vs {tensor.data.shape}")
        tensor.data[...] = ckpt.params[name]
    vocab = None
    if "vocab_tokens" in ckpt.config:
        vocab = Vocabulary(ckpt.config["vocab_tokens"])
    return policy, vocab, ckpt


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty CSV")
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]
