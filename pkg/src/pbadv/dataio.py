"""Vocabularies, split manifests, feature/embedding files and the synthetic generator.

File formats
------------
Manifest (JSON)::

    {"attributes": [...], "objects": [...],
     "pairs_seen": [[attr, obj], ...], "pairs_unseen": [...], "pairs_val_unseen": [...],
     "samples": [{"id": ..., "attr": ..., "obj": ..., "split": "train|val|test"}, ...]}

Feature file (binary, little-endian)::

    b"PBFV" | u32 version=1 | u32 count | u32 dim |
    count x (u16 id_len | id bytes utf-8 | dim x f32)

Embedding file: one ``token v1 ... vdim`` per line, whitespace separated.
"""

import json
import logging
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
FEATURE_MAGIC = b"PBFV"
FEATURE_VERSION = 1


@dataclass
class Vocabulary:
    attributes: list
    objects: list
    pairs_seen: list
    pairs_unseen: list
    pairs_val_unseen: list = field(default_factory=list)
    # pairs observed per split in the sample list; filled by load/generation
    split_pairs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.attributes = list(self.attributes)
        self.objects = list(self.objects)
        self.pairs_seen = [tuple(p) for p in self.pairs_seen]
        self.pairs_unseen = [tuple(p) for p in self.pairs_unseen]
        self.pairs_val_unseen = [tuple(p) for p in self.pairs_val_unseen]
        self.attr_index = {a: i for i, a in enumerate(self.attributes)}
        self.obj_index = {o: i for i, o in enumerate(self.objects)}
        self.validate()

    @property
    def m(self):
        return len(self.attributes)

    @property
    def n(self):
        return len(self.objects)

    def validate(self):
        if len(self.attr_index) != self.m or len(self.obj_index) != self.n:
            raise DataError("duplicate attribute or object names")
        for name, pairs in (
            ("pairs_seen", self.pairs_seen),
            ("pairs_unseen", self.pairs_unseen),
            ("pairs_val_unseen", self.pairs_val_unseen),
        ):
            if len(set(pairs)) != len(pairs):
                raise DataError(f"{name} contains duplicates")
            for a, o in pairs:
                if not (0 <= a < self.m and 0 <= o < self.n):
                    raise DataError(f"{name}: pair index ({a}, {o}) out of range")
        seen = set(self.pairs_seen)
        for name, pairs in (("pairs_unseen", self.pairs_unseen), ("pairs_val_unseen", self.pairs_val_unseen)):
            clash = seen.intersection(pairs)
            if clash:
                a, o = sorted(clash)[0]
                raise DataError(
                    f"{name} overlaps pairs_seen at ({self.attributes[a]}, {self.objects[o]})"
                )
        if len(self.pairs_seen) + len(self.pairs_unseen) > self.m * self.n:
            raise DataError("more seen+unseen pairs than the attribute x object grid")

    def pair_name(self, pair):
        a, o = pair
        return f"{self.attributes[a]} {self.objects[o]}"

    def grid(self):
        return [(a, o) for a in range(self.m) for o in range(self.n)]


@dataclass
class Sample:
    id: str
    attr: int
    obj: int
    split: str
    feature: np.ndarray = None


class Dataset:
    """Feature matrix plus labels for every sample of a manifest."""

    def __init__(self, vocab, samples, features):
        self.vocab = vocab
        self.ids = [s.id for s in samples]
        self.attrs = np.array([s.attr for s in samples], dtype=np.int64)
        self.objs = np.array([s.obj for s in samples], dtype=np.int64)
        self.splits = np.array([s.split for s in samples])
        self.features = np.asarray(features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] != len(samples):
            raise DataError(f"feature matrix shape {self.features.shape} does not match {len(samples)} samples")

    @property
    def dim(self):
        return self.features.shape[1]

    def __len__(self):
        return len(self.ids)

    def indices(self, split):
        return np.flatnonzero(self.splits == split)

    def samples(self):
        return [
            Sample(i, int(a), int(o), str(s), f)
            for i, a, o, s, f in zip(self.ids, self.attrs, self.objs, self.splits, self.features)
        ]


def _split_pairs_from(samples):
    out = {}
    for split in SPLITS:
        seen = {}
        for s in samples:
            if s.split == split:
                seen.setdefault((s.attr, s.obj), None)
        out[split] = list(seen)
    return out


def check_samples(vocab, samples):
    """Validate split invariants; fills ``vocab.split_pairs``."""
    seen = set(vocab.pairs_seen)
    ids = set()
    for s in samples:
        if s.id in ids:
            raise DataError(f"duplicate sample id {s.id!r}")
        ids.add(s.id)
        if s.split not in SPLITS:
            raise DataError(f"sample {s.id!r}: unknown split {s.split!r}")
        if not (0 <= s.attr < vocab.m and 0 <= s.obj < vocab.n):
            raise DataError(f"sample {s.id!r}: label out of range")
        if s.split == "train" and (s.attr, s.obj) not in seen:
            raise DataError(
                f"sample {s.id!r}: train sample carries unseen pair "
                f"({vocab.attributes[s.attr]}, {vocab.objects[s.obj]})"
            )
    vocab.split_pairs = _split_pairs_from(samples)


# ---------------------------------------------------------------------------
# manifest


def load_manifest(path):
    """Read a JSON manifest; returns ``(Vocabulary, [Sample stub, ...])``."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("attributes", "objects", "pairs_seen", "pairs_unseen", "samples"):
        if key not in raw:
            raise DataError(f"{path}: manifest missing key {key!r}")
    attributes = list(raw["attributes"])
    objects = list(raw["objects"])
    a_idx = {a: i for i, a in enumerate(attributes)}
    o_idx = {o: i for i, o in enumerate(objects)}

    def to_pairs(name):
        pairs = []
        for item in raw.get(name, []):
            a, o = item
            if a not in a_idx or o not in o_idx:
                raise DataError(f"{name}: unknown pair ({a}, {o})")
            pairs.append((a_idx[a], o_idx[o]))
        return pairs

    vocab = Vocabulary(
        attributes,
        objects,
        to_pairs("pairs_seen"),
        to_pairs("pairs_unseen"),
        to_pairs("pairs_val_unseen"),
    )
    samples = []
    for rec in raw["samples"]:
        sid = str(rec.get("id"))
        if rec.get("attr") not in a_idx:
            raise DataError(f"sample {sid!r}: unknown attribute {rec.get('attr')!r}")
        if rec.get("obj") not in o_idx:
            raise DataError(f"sample {sid!r}: unknown object {rec.get('obj')!r}")
        samples.append(Sample(sid, a_idx[rec["attr"]], o_idx[rec["obj"]], rec.get("split")))
    check_samples(vocab, samples)
    return vocab, samples


def save_manifest(path, vocab, samples):
    def names(pairs):
        return [[vocab.attributes[a], vocab.objects[o]] for a, o in pairs]

    raw = {
        "attributes": vocab.attributes,
        "objects": vocab.objects,
        "pairs_seen": names(vocab.pairs_seen),
        "pairs_unseen": names(vocab.pairs_unseen),
        "pairs_val_unseen": names(vocab.pairs_val_unseen),
        "samples": [
            {"id": s.id, "attr": vocab.attributes[s.attr], "obj": vocab.objects[s.obj], "split": s.split}
            for s in samples
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(raw, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# features


def save_features(path, ids, matrix):
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ContractError(f"need one row per id, got {matrix.shape} for {len(ids)} ids")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, len(ids), matrix.shape[1]))
        for sid, row in zip(ids, matrix):
            raw = str(sid).encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ContractError(f"id too long: {sid[:40]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(row.tobytes())


def load_features(path, expected_ids=None):
    """Read a feature file into ``{id: float32 vector}``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16 or buf[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic, not a feature file")
    version, count, dim = struct.unpack_from("<III", buf, 4)
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    pos = 16
    row_bytes = 4 * dim
    out = {}
    for k in range(count):
        if pos + 2 > len(buf):
            raise DataError(f"{path}: truncated at record {k} (id length)")
        (id_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + id_len > len(buf):
            raise DataError(f"{path}: truncated at record {k} (id bytes)")
        sid = buf[pos : pos + id_len].decode("utf-8")
        pos += id_len
        if pos + row_bytes > len(buf):
            raise DataError(f"{path}: truncated at record {k} ({sid!r}): expected {dim} values")
        vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float32)
        pos += row_bytes
        if sid in out:
            raise DataError(f"{path}: duplicate id {sid!r}")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}: non-finite values in feature {sid!r}")
        out[sid] = vec
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes after {count} records")
    if expected_ids is not None:
        missing = [i for i in expected_ids if i not in out]
        if missing:
            raise DataError(f"{path}: {len(missing)} missing feature id(s), e.g. {missing[:5]}")
    return out


# ---------------------------------------------------------------------------
# word embeddings


@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict

    def matrix(self, tokens):
        return np.stack([self.vectors[t] for t in tokens]).astype(np.float32)


def token_parts(token):
    return [p for p in re.split(r"[^0-9A-Za-z]+", token) if p]


def load_embeddings(path, tokens):
    """Resolve ``tokens`` against a whitespace text embedding file.

    Lookup order: exact token, lower-cased token, then the mean of the
    vectors of its alphanumeric parts (e.g. ``Faux.Leather``).
    """
    tokens = list(tokens)
    wanted = set()
    for t in tokens:
        wanted.update((t, t.lower()))
        for p in token_parts(t):
            wanted.update((p, p.lower()))
    found = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            head, _, rest = line.strip().partition(" ")
            if not head or head not in wanted or head in found:
                continue
            vec = np.array(rest.split(), dtype=np.float32)
            if dim is None:
                dim = vec.size
            if vec.size != dim or dim == 0:
                raise DataError(f"{path}:{lineno}: expected {dim} values for {head!r}, got {vec.size}")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}:{lineno}: non-finite value for {head!r}")
            found[head] = vec
    vectors = {}
    missing = []
    for t in tokens:
        for key in (t, t.lower()):
            if key in found:
                vectors[t] = found[key]
                break
        else:
            parts = [found.get(p, found.get(p.lower())) for p in token_parts(t)]
            parts = [v for v in parts if v is not None]
            if parts:
                vectors[t] = np.mean(parts, axis=0).astype(np.float32)
            else:
                missing.append(t)
    if missing:
        raise DataError(f"{path}: unresolvable token(s): {missing}")
    return EmbeddingTable(dim or 0, vectors)


def save_embeddings(path, table):
    with open(path, "w", encoding="utf-8") as fh:
        for tok, vec in table.vectors.items():
            fh.write(tok + " " + " ".join(repr(float(v)) for v in np.asarray(vec, dtype=np.float32)) + "\n")


def load_dataset(manifest_path, features_path):
    vocab, samples = load_manifest(manifest_path)
    feats = load_features(features_path, [s.id for s in samples])
    matrix = np.stack([feats[s.id] for s in samples]) if samples else np.zeros((0, 0), np.float32)
    return Dataset(vocab, samples, matrix)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthData:
    dataset: Dataset
    embeddings: EmbeddingTable
    latents: dict


def _choose_seen(m, n, n_seen, rng):
    """Random seen-pair subset that still covers every attribute and object."""
    cover = []
    perm_a = rng.permutation(m)
    perm_o = rng.permutation(n)
    for k in range(max(m, n)):
        cover.append((int(perm_a[k % m]), int(perm_o[k % n])))
    cover = list(dict.fromkeys(cover))
    if n_seen < len(cover):
        raise ContractError(f"seen_fraction too small to cover all primitives ({n_seen} < {len(cover)})")
    rest = [p for p in ((a, o) for a in range(m) for o in range(n)) if p not in set(cover)]
    extra = rng.permutation(len(rest))[: n_seen - len(cover)]
    chosen = set(cover) | {rest[i] for i in extra}
    return sorted(chosen)


def _unit_rows(rng, k, d):
    x = rng.standard_normal((k, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def synth_generate(
    m,
    n,
    D,
    seen_fraction,
    samples_per_pair,
    seed,
    sigma=0.1,
    gamma=0.5,
    word_dim=300,
    word_noise=0.01,
    test_per_pair=None,
    val_per_pair=None,
):
    """Generate a compositional dataset with known primitive latents.

    Features are ``R @ (concat(u_a, u_o) + gamma * M @ unit(u_a * u_o)) + sigma * z``
    where R is a fixed random rotation and M a fixed orthonormal mixing map,
    so the attribute/object split is not visible in raw coordinates and the
    attribute rendering depends on the object. Word vectors are noisy linear
    images of the same latents.
    """
    if m < 2 or n < 2:
        raise ContractError("need m >= 2 and n >= 2")
    if D < 2 or D % 2:
        raise ContractError(f"D must be even and >= 2, got {D}")
    if not 0.0 < seen_fraction < 1.0:
        raise ContractError("seen_fraction must be in (0, 1)")
    n_seen = int(round(seen_fraction * m * n))
    if n_seen >= m * n:
        raise ContractError("parameters leave no unseen pair")
    if samples_per_pair < 1:
        raise ContractError("samples_per_pair must be >= 1")
    test_per_pair = max(1, samples_per_pair // 2) if test_per_pair is None else test_per_pair
    val_per_pair = max(1, samples_per_pair // 4) if val_per_pair is None else val_per_pair

    rng = np.random.default_rng(seed)
    half = D // 2
    u_attr = _unit_rows(rng, m, half)
    u_obj = _unit_rows(rng, n, half)
    rotation, _ = np.linalg.qr(rng.standard_normal((D, D)))
    mix, _ = np.linalg.qr(rng.standard_normal((D, half)))
    proj_a = rng.standard_normal((word_dim, half)) / np.sqrt(half)
    proj_o = rng.standard_normal((word_dim, half)) / np.sqrt(half)

    pairs_seen = _choose_seen(m, n, n_seen, rng)
    seen_set = set(pairs_seen)
    pairs_unseen = [(a, o) for a in range(m) for o in range(n) if (a, o) not in seen_set]

    def render(a, o, count):
        clean = np.concatenate([u_attr[a], u_obj[o]])
        inter = u_attr[a] * u_obj[o]
        norm = np.linalg.norm(inter)
        if gamma and norm > 0:
            clean = clean + gamma * (mix @ (inter / norm))
        base = rotation @ clean
        return base[None, :] + sigma * rng.standard_normal((count, D))

    attributes = [f"attr{i}" for i in range(m)]
    objects = [f"obj{j}" for j in range(n)]
    samples = []
    rows = []
    plan = [("train", p, samples_per_pair) for p in pairs_seen]
    plan += [("val", p, val_per_pair) for p in pairs_seen + pairs_unseen]
    plan += [("test", p, test_per_pair) for p in pairs_seen + pairs_unseen]
    for split, (a, o), count in plan:
        feats = render(a, o, count)
        for k in range(count):
            samples.append(Sample(f"{split}-{a}-{o}-{k}", a, o, split))
            rows.append(feats[k])
    features = np.asarray(rows, dtype=np.float32)

    words = {}
    for i, name in enumerate(attributes):
        words[name] = (proj_a @ u_attr[i] + word_noise * rng.standard_normal(word_dim)).astype(np.float32)
    for j, name in enumerate(objects):
        words[name] = (proj_o @ u_obj[j] + word_noise * rng.standard_normal(word_dim)).astype(np.float32)

    vocab = Vocabulary(attributes, objects, pairs_seen, pairs_unseen, list(pairs_unseen))
    check_samples(vocab, samples)
    latents = {"attr": u_attr, "obj": u_obj, "rotation": rotation, "mix": mix}
    return SynthData(Dataset(vocab, samples, features), EmbeddingTable(word_dim, words), latents)
