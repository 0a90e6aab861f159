"""Vocabulary, corpus ingestion, synthetic data generation, and batching.

Corpus files are JSONL: the first line is metadata {"d_img": ...}, each
following line is one record {"id", "src", "tgt", "img"} with src/tgt as
raw caption text and img as a list of reals. Synthetic corpora add a
"salient" field naming the token whose code dominates the image vector.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Matrix

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")

_STRIP_CHARS = '.,!?;:"()'


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip leading/trailing punctuation."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP_CHARS)
        if tok:
            out.append(tok)
    return out


class Vocabulary:
    """Token <-> dense id mapping with fixed reserved ids 0..3."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(RESERVED) + list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, text: str) -> np.ndarray:
        """Token ids for text, wrapped in BOS/EOS."""
        ids = [BOS] + [self.id_of(t) for t in tokenize(text)] + [EOS]
        return np.array(ids, dtype=np.int64)

    def content_tokens(self) -> list[str]:
        return self.tokens[len(RESERVED):]


def build_vocab(corpus: "Corpus", min_count: int = 1) -> Vocabulary:
    """Count tokens over src and tgt captions; keep those with frequency >= min_count.

    Ids after the reserved block are assigned by descending frequency, ties
    broken lexicographically, so two builds over the same corpus agree.
    """
    if not corpus.records:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for rec in corpus.records:
        counts.update(tokenize(rec.src))
        counts.update(tokenize(rec.tgt))
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class EmbeddingTable:
    """Initial word-embedding weights (V x d_e) plus file-coverage fraction."""

    weights: Matrix
    dim: int
    coverage: float


def load_embeddings(path, vocab: Vocabulary, dim: int, seed: int = 0) -> EmbeddingTable:
    """Read GloVe-style text (token then dim reals per line) into a table.

    Tokens absent from the file are initialized uniform in [-0.1, 0.1];
    the PAD row is zeroed. Coverage is the covered fraction of the
    non-reserved vocabulary.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    weights = rng.uniform(-0.1, 0.1, size=(vocab.size, dim))
    covered = 0
    content = set(vocab.content_tokens())
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ValueError(
                    f"embedding file line {lineno}: expected {dim} values, got {len(values)}"
                )
            if token in content:
                weights[vocab.index[token]] = [float(v) for v in values]
                covered += 1
    weights[PAD] = 0.0
    coverage = covered / len(content) if content else 1.0
    return EmbeddingTable(weights=Matrix(weights), dim=dim, coverage=coverage)


@dataclass
class CaptionRecord:
    """One raw corpus entry: paired captions plus an image-feature vector."""

    id: str
    src: str
    tgt: str
    img: np.ndarray
    salient: str | None = None


@dataclass
class Corpus:
    d_img: int
    records: list[CaptionRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"d_img": self.d_img}) + "\n")
            for rec in self.records:
                obj = {"id": rec.id, "src": rec.src, "tgt": rec.tgt, "img": rec.img.tolist()}
                if rec.salient is not None:
                    obj["salient"] = rec.salient
                fh.write(json.dumps(obj) + "\n")

    @classmethod
    def load(cls, path) -> "Corpus":
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            d_img = int(header["d_img"])
            records = []
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                img = np.asarray(obj["img"], dtype=np.float64)
                if img.shape != (d_img,):
                    raise ValueError(
                        f"corpus line {lineno}: image width {img.shape} does not match d_img={d_img}"
                    )
                if not np.linalg.norm(img) > 0:
                    raise ValueError(f"corpus line {lineno}: zero-norm image vector")
                records.append(
                    CaptionRecord(
                        id=str(obj["id"]), src=obj["src"], tgt=obj["tgt"],
                        img=img, salient=obj.get("salient"),
                    )
                )
        return cls(d_img=d_img, records=records)


@dataclass
class Sample:
    """A numericalized corpus record: BOS/EOS-wrapped id sequences."""

    id: str
    src: np.ndarray
    tgt: np.ndarray
    img: np.ndarray


def numericalize(corpus: Corpus, vocab: Vocabulary) -> list[Sample]:
    return [
        Sample(id=rec.id, src=vocab.encode(rec.src), tgt=vocab.encode(rec.tgt), img=rec.img)
        for rec in corpus.records
    ]


# ---------------------------------------------------------------------------
# synthetic corpus


def token_codes(v_content: int, d_img: int, seed: int) -> np.ndarray:
    """Fixed per-token Gaussian code vectors N(0, I)/sqrt(d_img), (V_content, d_img)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return rng.standard_normal((v_content, d_img)) / np.sqrt(d_img)


def synthetic_token_names(v_content: int) -> tuple[list[str], list[str]]:
    """Token names, split into a visual-word pool and an ordinary pool.

    Visual words form a small designated sub-vocabulary (about 1/8 of the
    content tokens); the salient token of a sample is always one of them.
    """
    n_visual = max(1, v_content // 8)
    visual = [f"vis{i:02d}" for i in range(n_visual)]
    ordinary = [f"obj{i:02d}" for i in range(v_content - n_visual)]
    return visual, ordinary


def gen_synthetic(n: int, v_content: int, d_img: int, seed: int) -> Corpus:
    """Deterministic copy-task corpus with token-code image vectors.

    Each sample draws 3..8 distinct content tokens (1..3 of them visual
    words), shuffles them into src, and copies src to tgt. The salient
    token is the visual word that lands earliest in the shuffled sentence;
    the image vector is the L2-normalized sum of the member tokens' codes
    with the salient token's code weighted 4x. Because salience depends on
    token order, no bag-of-tokens summary can predict the image exactly:
    recovering it requires locating the salient position.
    """
    if v_content < 8:
        raise ValueError(f"v_content must be >= 8, got {v_content}")
    visual_names, ordinary_names = synthetic_token_names(v_content)
    names = visual_names + ordinary_names
    codes = token_codes(v_content, d_img, seed)
    code_of = {name: codes[i] for i, name in enumerate(names)}

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    records = []
    for i in range(n):
        k = int(rng.integers(3, 9))
        n_vis = min(int(rng.integers(1, 4)), len(visual_names), k - 1)
        vis = list(rng.choice(visual_names, size=n_vis, replace=False))
        obj = list(rng.choice(ordinary_names, size=k - n_vis, replace=False))
        tokens = vis + obj
        rng.shuffle(tokens)
        salient = next(t for t in tokens if t in code_of and t.startswith("vis"))
        vec = sum(code_of[t] * (4.0 if t == salient else 1.0) for t in tokens)
        vec = vec / np.linalg.norm(vec)
        text = " ".join(tokens)
        records.append(
            CaptionRecord(id=f"synth-{i:04d}", src=text, tgt=text, img=vec, salient=salient)
        )
    return Corpus(d_img=d_img, records=records)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded id arrays plus masks; every other sample is an in-batch negative."""

    ids: list[str]
    src: np.ndarray        # (B, Ts) int, PAD-padded
    src_mask: np.ndarray   # (B, Ts) bool, True on real tokens
    tgt: np.ndarray
    tgt_mask: np.ndarray
    images: np.ndarray     # (B, d_img)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("batch contains duplicate sample ids")
        if self.size < 2:
            raise ValueError("a batch needs at least 2 samples for in-batch negatives")

    @property
    def size(self) -> int:
        return len(self.ids)

    def negatives(self, k: int) -> list[int]:
        return [j for j in range(self.size) if j != k]

    def src_ids(self, k: int) -> np.ndarray:
        return self.src[k, self.src_mask[k]]

    def tgt_ids(self, k: int) -> np.ndarray:
        return self.tgt[k, self.tgt_mask[k]]


def _pad(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_batches(samples: list[Sample], batch_size: int, seed: int, epoch: int = 0) -> list[Batch]:
    """Shuffle samples with a (seed, epoch)-derived generator and batch them.

    A trailing short batch is kept only if it still has >= 2 samples.
    """
    if batch_size < 2:
        raise ValueError(f"batch size must be >= 2, got {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch]))
    order = rng.permutation(len(samples))
    batches = []
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        if len(chunk) < 2:
            break
        src, src_mask = _pad([s.src for s in chunk])
        tgt, tgt_mask = _pad([s.tgt for s in chunk])
        batches.append(
            Batch(
                ids=[s.id for s in chunk],
                src=src, src_mask=src_mask,
                tgt=tgt, tgt_mask=tgt_mask,
                images=np.stack([s.img for s in chunk]),
            )
        )
    return batches
