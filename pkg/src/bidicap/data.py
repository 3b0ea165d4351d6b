"""Vocabulary, caption pairing, the synthetic corpus generator and dataset
file I/O.

Tokenization is whitespace-only throughout. Dataset files are line-delimited
JSON, one image per line:

    {"image_id": str,
     "captions": [[token, ...], ...],          # reference captions
     "feature_shape": [n_regions, feature_dim],
     "feature_data": base64(raw little-endian float32, row-major)}
"""

from __future__ import annotations

import base64
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, PairingError

PAD, L2R, R2L, EOS, UNK = "<pad>", "<l2r>", "<r2l>", "<eos>", "<unk>"
RESERVED = (PAD, L2R, R2L, EOS, UNK)
MAX_CAPTION_TOKENS = 16


@dataclass(frozen=True)
class SpecialTokens:
    pad: int
    l2r: int
    r2l: int
    eos: int
    unk: int


class Vocabulary:
    """Token <-> id bijection with fixed reserved ids (pad=0, then the two
    direction prefixes, eos, unk)."""

    def __init__(self, tokens: list[str], min_count: int = 5):
        if list(tokens[: len(RESERVED)]) != list(RESERVED):
            raise InputError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.min_count = min_count

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def specials(self) -> SpecialTokens:
        return SpecialTokens(0, 1, 2, 3, 4)

    def encode(self, tokens) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"min_count": self.min_count, "tokens": self.tokens}, f)

    @staticmethod
    def load(path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            blob = json.load(f)
        return Vocabulary(blob["tokens"], blob.get("min_count", 5))


def build_vocab(corpus, min_count: int = 5) -> Vocabulary:
    """Count tokens over an iterable of token sequences and keep the ones seen
    at least `min_count` times. Ids are deterministic: reserved tokens first,
    then (descending count, lexicographic)."""
    counts = Counter()
    n_captions = 0
    for caption in corpus:
        n_captions += 1
        counts.update(caption)
    if n_captions == 0:
        raise InputError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept, min_count)


@dataclass(frozen=True)
class RegionFeatureSet:
    """One image as a set of fixed-dimension region vectors."""

    image_id: str
    features: np.ndarray  # (n_regions, feature_dim) float32

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InputError(
                f"{self.image_id}: features must be (n_regions>=1, dim), "
                f"got {self.features.shape}"
            )
        if not np.isfinite(self.features).all():
            raise InputError(f"{self.image_id}: non-finite region features")


@dataclass(frozen=True)
class CaptionRecord:
    """One image's reference captions (token lists)."""

    image_id: str
    captions: tuple


def truncate_caption(tokens, max_tokens: int = MAX_CAPTION_TOKENS) -> list[str]:
    return list(tokens)[:max_tokens]


@dataclass
class BiCaptionPair:
    """An aligned training pair: a forward caption and a reversed partner
    caption from the same image, padded to a common length.

    Arrays all have length T+1 where T is the longer content length; inputs
    start with the direction prefix, targets end with eos (then pads). Pad
    positions are excluded from every loss.
    """

    fwd_input: np.ndarray
    fwd_target: np.ndarray
    bwd_input: np.ndarray
    bwd_target: np.ndarray
    length: int  # T, the common content length


def pair_from_ids(fwd_ids, partner_ids, specials: SpecialTokens,
                  fwd_eos: bool = True, bwd_eos: bool = True) -> BiCaptionPair:
    """Build a padded pair from forward-order content ids. The partner is
    reversed here. The eos flags exist for re-scoring sampled sequences that
    hit the length cap without emitting eos."""
    fwd = list(fwd_ids)
    bwd = list(reversed(list(partner_ids)))
    t = max(len(fwd), len(bwd))
    if t == 0:
        raise PairingError("cannot pair two empty captions")

    def build(content, with_eos):
        inp = np.full(t + 1, specials.pad, dtype=np.int64)
        tgt = np.full(t + 1, specials.pad, dtype=np.int64)
        inp[1 : 1 + len(content)] = content
        tgt[: len(content)] = content
        if with_eos:
            tgt[len(content)] = specials.eos
        return inp, tgt

    fwd_in, fwd_tgt = build(fwd, fwd_eos)
    bwd_in, bwd_tgt = build(bwd, bwd_eos)
    fwd_in[0] = specials.l2r
    bwd_in[0] = specials.r2l
    return BiCaptionPair(fwd_in, fwd_tgt, bwd_in, bwd_tgt, t)


def make_pairs(record: CaptionRecord, vocab: Vocabulary, rng,
               max_tokens: int = MAX_CAPTION_TOKENS) -> list[BiCaptionPair]:
    """One pair per reference as the forward side; the backward partner is a
    uniformly drawn *different* reference of the same image, reversed."""
    refs = [truncate_caption(c, max_tokens) for c in record.captions]
    if len(refs) < 2:
        raise PairingError(
            f"{record.image_id}: pairing needs >= 2 references, got {len(refs)}"
        )
    sp = vocab.specials
    pairs = []
    for i, fwd in enumerate(refs):
        j = int(rng.integers(len(refs) - 1))
        if j >= i:
            j += 1
        pairs.append(pair_from_ids(vocab.encode(fwd), vocab.encode(refs[j]), sp))
    return pairs


def strip_specials(tokens, specials: SpecialTokens) -> list[int]:
    """Drop prefix/pad ids and cut at the first eos (for metric scoring)."""
    out = []
    for t in tokens:
        if t == specials.eos:
            break
        if t in (specials.pad, specials.l2r, specials.r2l):
            continue
        out.append(int(t))
    return out


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

ATTRIBUTE_KINDS = (
    ("object", ("dog", "cat", "bird", "horse", "fish", "cow", "sheep", "duck")),
    ("color", ("red", "blue", "green", "black", "white", "brown")),
    ("count", ("one", "two", "three", "four")),
    ("place", ("park", "beach", "road", "field", "river", "barn")),
)

# Templates name their slots; attributes are deliberately realized both early
# and late in the sentence so neither decoding direction is trivially easier.
# Every template of a level shares an attribute-bearing core phrase, so a
# correct caption overlaps every reference regardless of which template the
# decoder commits to; lengths are kept similar so sequence log-probabilities
# stay comparable across templates.
TEMPLATES = (
    # object + color level: core "a {color} {object}"
    "a {color} {object} sits here today",
    "here you can see a {color} {object}",
    "the photo shows a {color} {object}",
    "a {color} {object} appears very calm",
    "watch a {color} {object} for a while",
    "a {color} {object} in a close view",
    # + count level: core "{count} {color} {object}"
    "{count} {color} {object} stand here today",
    "here you can see {count} {color} {object}",
    "the photo shows {count} {color} {object}",
    "{count} {color} {object} appear very calm",
    "a group of {count} {color} {object}",
    # + place level: core phrase plus "the {place}" at either end
    "{count} {color} {object} wait near the {place}",
    "near the {place} wait {count} {color} {object}",
    "people at the {place} watch {count} {color} {object}",
    "{count} {color} {object} can be seen at the {place}",
    "the {place} shows {count} {color} {object} today",
    "a view of {count} {color} {object} by the {place}",
    "by the {place} you see {count} {color} {object}",
)


@dataclass
class SynthSpec:
    """Knobs for the synthetic corpus generator."""

    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_regions: int = 6
    feature_dim: int = 48
    n_attributes: int = 4  # first n of ATTRIBUTE_KINDS are active
    noise_std: float = 0.1
    refs_per_image: int = 5
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if not 2 <= self.n_attributes <= len(ATTRIBUTE_KINDS):
            raise InputError(f"n_attributes must be 2..{len(ATTRIBUTE_KINDS)}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise InputError("every split needs at least one image")
        if self.n_regions < 1 or self.feature_dim < 4:
            raise InputError("need n_regions >= 1 and feature_dim >= 4")
        if self.refs_per_image < 2:
            raise InputError("pairing requires refs_per_image >= 2")
        if len(self._templates()) < self.refs_per_image:
            raise InputError(
                f"only {len(self._templates())} templates fit {self.n_attributes} "
                f"attributes; need {self.refs_per_image}"
            )
        return self

    def _active_kinds(self):
        return ATTRIBUTE_KINDS[: self.n_attributes]

    def _templates(self):
        # exact slot match: every reference realizes every active attribute
        active = {k for k, _ in self._active_kinds()}
        out = []
        for tpl in TEMPLATES:
            slots = {w.strip(".,")[1:-1] for w in tpl.split() if w.startswith("{")}
            if slots == active:
                out.append(tpl)
        return out


@dataclass
class DatasetSplit:
    records: list = field(default_factory=list)
    features: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(zip(self.records, self.features))


def _template_weights(n: int) -> np.ndarray:
    w = 1.0 / (1.0 + np.arange(n, dtype=np.float64))
    return w / w.sum()


def _attribute_directions(spec: SynthSpec) -> list[np.ndarray]:
    """One fixed random unit direction per (kind, value), derived from the
    corpus seed so the encoding is stable across runs."""
    dirs = []
    for k, (_, values) in enumerate(spec._active_kinds()):
        rows = np.empty((len(values), spec.feature_dim), dtype=np.float64)
        for v in range(len(values)):
            g = np.random.default_rng([spec.seed, 7001, k, v])
            d = g.normal(size=spec.feature_dim)
            rows[v] = d / np.linalg.norm(d)
        dirs.append(rows)
    return dirs


def synth_corpus(spec: SynthSpec, rng=None) -> dict[str, DatasetSplit]:
    """Generate disjoint train/val/test splits of synthetic images.

    Each image draws one value per active attribute kind; region r encodes
    attribute (r mod n_attributes) as that value's direction plus gaussian
    noise, and the references realize the attributes through templated
    grammar. Deterministic given the spec (byte-identical across runs)."""
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    kinds = spec._active_kinds()
    templates = spec._templates()
    dirs = _attribute_directions(spec)

    splits = {"train": DatasetSplit(), "val": DatasetSplit(), "test": DatasetSplit()}
    counter = 0
    for split_name, n_images in (("train", spec.n_train), ("val", spec.n_val),
                                 ("test", spec.n_test)):
        split = splits[split_name]
        for _ in range(n_images):
            image_id = f"img{counter:06d}"
            counter += 1
            values = {name: int(rng.integers(len(vals))) for name, vals in kinds}
            feats = np.empty((spec.n_regions, spec.feature_dim), dtype=np.float64)
            for r in range(spec.n_regions):
                k = r % len(kinds)
                name = kinds[k][0]
                feats[r] = dirs[k][values[name]]
            feats += spec.noise_std * rng.normal(size=feats.shape)
            fills = {name: vals[values[name]] for name, vals in kinds}
            # non-uniform template popularity gives the corpus a consensus
            # structure: common phrasings are both more probable under a
            # trained model and more likely to appear among the references
            weights = _template_weights(len(templates))
            chosen = rng.choice(len(templates), size=spec.refs_per_image,
                                replace=False, p=weights, shuffle=False)
            captions = tuple(
                tuple(templates[int(i)].format(**fills).split()) for i in chosen
            )
            split.records.append(CaptionRecord(image_id, captions))
            split.features.append(RegionFeatureSet(image_id, feats.astype(np.float32)))
    return splits


# ---------------------------------------------------------------------------
# dataset file I/O
# ---------------------------------------------------------------------------


def save_dataset(records, features, path: str) -> None:
    if len(records) != len(features):
        raise InputError("records and features must align")
    with open(path, "w", encoding="utf-8") as f:
        for rec, feat in zip(records, features):
            if rec.image_id != feat.image_id:
                raise InputError(
                    f"record/feature id mismatch: {rec.image_id} vs {feat.image_id}"
                )
            arr = np.ascontiguousarray(feat.features, dtype="<f4")
            row = {
                "image_id": rec.image_id,
                "captions": [list(c) for c in rec.captions],
                "feature_shape": list(arr.shape),
                "feature_data": base64.b64encode(arr.tobytes()).decode("ascii"),
            }
            f.write(json.dumps(row) + "\n")


def load_dataset(path: str) -> DatasetSplit:
    split = DatasetSplit()
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            shape = tuple(row["feature_shape"])
            raw = base64.b64decode(row["feature_data"])
            if len(raw) != 4 * int(np.prod(shape)):
                raise InputError(
                    f"{path}: feature payload for {row['image_id']} does not "
                    f"match shape {shape}"
                )
            feats = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            split.records.append(
                CaptionRecord(row["image_id"], tuple(tuple(c) for c in row["captions"]))
            )
            split.features.append(RegionFeatureSet(row["image_id"], feats))
    return split
