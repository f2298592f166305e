"""Synthetic bilingual corpora and tasks.

A seeded generator produces a source "language" with Zipfian unigram
frequencies and short-range bigram structure. Target languages are derived
deterministically by a bijective token cipher with a controllable fraction
of shared surface forms, plus an optional word-order transform. Task labels
are defined by functions that commute with both transforms, so zero-shot
transfer accuracy is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, MASK, BOS, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[MASK]", "[BOS]", "[UNK]")
N_RESERVED = len(RESERVED)

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class Vocab:
    """Bijection between token strings and ids; ids 0-3 are reserved."""

    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {t: i for i, t in enumerate(self.tokens)}
        assert self.tokens[:N_RESERVED] == list(RESERVED)
        assert len(self.index) == len(self.tokens), "duplicate surface forms"

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def save(self, path: Path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tokens=tokens)


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str] | None = None) -> list[str]:
    """Deterministic unique pronounceable strings, 2-4 CV syllables."""
    taken = set(taken or ())
    out: list[str] = []
    while len(out) < n:
        k = int(rng.integers(2, 5))
        syls = rng.integers(0, len(_CONSONANTS) * len(_VOWELS), size=k)
        word = "".join(_CONSONANTS[s // len(_VOWELS)] + _VOWELS[s % len(_VOWELS)] for s in syls)
        if word in taken:
            continue
        taken.add(word)
        out.append(word)
    return out


def make_vocab(V: int, seed: int, exclude: set[str] | None = None) -> Vocab:
    if V <= N_RESERVED:
        raise ValueError(f"vocabulary size {V} must exceed the {N_RESERVED} reserved tokens")
    rng = np.random.default_rng(seed)
    words = _pseudo_words(rng, V - N_RESERVED, taken=set(exclude or ()) | set(RESERVED))
    return Vocab(tokens=list(RESERVED) + words)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

Corpus = list  # list of 1-D int32 arrays, one per sentence


def generate_source_corpus(grammar_seed: int, size_tokens: int, V: int,
                           zipf_alpha: float = 1.05) -> tuple[Corpus, Vocab]:
    """Seeded corpus with Zipfian unigrams and a bigram successor process.

    Each token has three preferred successors; with probability 0.45 the next
    token follows the previous one's successor distribution, otherwise it is
    a fresh unigram draw. This gives MLM a learnable local signal while the
    marginal stays approximately Zipf.
    """
    vocab = make_vocab(V, seed=grammar_seed)
    rng = np.random.default_rng(grammar_seed + 1)
    n_reg = V - N_RESERVED
    ids = np.arange(N_RESERVED, V, dtype=np.int32)
    ranks = np.arange(1, n_reg + 1, dtype=np.float64)
    probs = ranks ** (-zipf_alpha)
    probs /= probs.sum()
    # frequency rank decoupled from id order
    rng.shuffle(probs)

    successors = ids[rng.integers(0, n_reg, size=(n_reg, 3))]
    succ_weights = np.array([0.5, 0.3, 0.2])

    corpus: Corpus = []
    total = 0
    while total < size_tokens:
        length = int(rng.integers(8, 25))
        unigram = rng.choice(ids, size=length, p=probs)
        use_succ = rng.random(length) < 0.45
        succ_col = rng.choice(3, size=length, p=succ_weights)
        sent = np.empty(length, dtype=np.int32)
        sent[0] = unigram[0]
        for t in range(1, length):
            if use_succ[t]:
                sent[t] = successors[sent[t - 1] - N_RESERVED, succ_col[t]]
            else:
                sent[t] = unigram[t]
        corpus.append(sent)
        total += length
    return corpus, vocab


# ---------------------------------------------------------------------------
# derived target languages
# ---------------------------------------------------------------------------

REORDER_RULES = ("none", "reverse", "sov_swap")
_SOV_CHUNK = 6


@dataclass(frozen=True)
class SyntheticLanguageSpec:
    """Deterministic definition of a target language: a bijective token
    cipher with a fixed number of identity mappings, plus a word-order rule."""

    cipher: np.ndarray  # shape (V,), identity on reserved ids
    overlap_fraction: float
    reorder: str
    seed: int

    def __post_init__(self):
        V = self.cipher.shape[0]
        if sorted(self.cipher.tolist()) != list(range(V)):
            raise ValueError("cipher is not a bijection")
        if not np.array_equal(self.cipher[:N_RESERVED], np.arange(N_RESERVED)):
            raise ValueError("cipher must fix reserved ids")
        if self.reorder not in REORDER_RULES:
            raise ValueError(f"unknown reorder rule {self.reorder!r}")
        want = int(np.floor(self.overlap_fraction * (V - N_RESERVED)))
        got = int(np.sum(self.cipher[N_RESERVED:] == np.arange(N_RESERVED, V)))
        if got != want:
            raise ValueError(f"cipher has {got} fixed points, expected {want}")

    @property
    def V(self) -> int:
        return int(self.cipher.shape[0])

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.cipher)
        inv[self.cipher] = np.arange(self.V)
        return inv


def build_language(V: int, overlap_fraction: float, reorder: str, seed: int) -> SyntheticLanguageSpec:
    if not 0.0 <= overlap_fraction <= 1.0:
        raise ValueError(f"overlap_fraction {overlap_fraction} outside [0, 1]")
    rng = np.random.default_rng(seed)
    n_reg = V - N_RESERVED
    k = int(np.floor(overlap_fraction * n_reg))
    regular = np.arange(N_RESERVED, V)
    overlap = rng.choice(regular, size=k, replace=False)
    moving = np.setdiff1d(regular, overlap)
    if moving.size == 1:
        raise ValueError("overlap fraction leaves a single non-overlapping token; "
                         "a bijection on one element cannot avoid a fixed point")
    cipher = np.arange(V, dtype=np.int64)
    if moving.size:
        order = rng.permutation(moving)
        cipher[order] = np.roll(order, -1)  # cyclic shift: a derangement on the moving set
    return SyntheticLanguageSpec(cipher=cipher, overlap_fraction=overlap_fraction,
                                 reorder=reorder, seed=seed)


def save_language_spec(spec: SyntheticLanguageSpec, path: Path):
    np.savez(path, cipher=spec.cipher, overlap_fraction=spec.overlap_fraction,
             reorder=np.array(spec.reorder), seed=spec.seed)


def load_language_spec(path: Path) -> SyntheticLanguageSpec:
    with np.load(path) as z:
        return SyntheticLanguageSpec(cipher=z["cipher"],
                                     overlap_fraction=float(z["overlap_fraction"]),
                                     reorder=str(z["reorder"]), seed=int(z["seed"]))


def apply_reorder(sent: np.ndarray, rule: str) -> np.ndarray:
    if rule == "none":
        return sent
    if rule == "reverse":
        return sent[::-1].copy()
    if rule == "sov_swap":
        # move the final token of each fixed-size chunk to the chunk front
        out = sent.copy()
        for start in range(0, len(sent), _SOV_CHUNK):
            chunk = sent[start:start + _SOV_CHUNK]
            if len(chunk) > 1:
                out[start] = chunk[-1]
                out[start + 1:start + len(chunk)] = chunk[:-1]
        return out
    raise ValueError(f"unknown reorder rule {rule!r}")


def transform_sentence(sent: np.ndarray, spec: SyntheticLanguageSpec) -> np.ndarray:
    return apply_reorder(spec.cipher[sent].astype(np.int32), spec.reorder)


def derive_target_language(corpus: Corpus, src_vocab: Vocab,
                           spec: SyntheticLanguageSpec) -> tuple[Corpus, Vocab]:
    """Cipher-map and reorder every sentence; build the target vocabulary.

    Target ids that are cipher fixed points keep the source surface form
    (these drive overlap initialization); all other target ids get fresh
    surface forms disjoint from the source vocabulary.
    """
    if spec.V != src_vocab.size:
        raise ValueError(f"language spec built for V={spec.V}, vocab has {src_vocab.size}")
    fixed = spec.cipher == np.arange(spec.V)
    n_fresh = int((~fixed).sum())
    fresh_iter = iter(_pseudo_words(np.random.default_rng(spec.seed + 7), n_fresh,
                                    taken=set(src_vocab.tokens)))
    tokens = [src_vocab.token(j) if fixed[j] else next(fresh_iter) for j in range(spec.V)]
    trg_vocab = Vocab(tokens=tokens)
    trg_corpus = [transform_sentence(s, spec) for s in corpus]
    return trg_corpus, trg_vocab


# ---------------------------------------------------------------------------
# classification tasks
# ---------------------------------------------------------------------------

TASK_KINDS = ("marker_parity", "pair_paraphrase")
PARAPHRASE_MATCH_THRESHOLD = 0.6


@dataclass
class TaskExample:
    seq1: np.ndarray
    seq2: np.ndarray | None
    label: int


@dataclass
class TaskDataset:
    kind: str
    train: list[TaskExample]
    dev: list[TaskExample]
    test: list[TaskExample]
    num_classes: int = 2
    marker_ids: np.ndarray | None = None  # marker_parity only

    def splits(self):
        return {"train": self.train, "dev": self.dev, "test": self.test}


def label_marker_parity(seq: np.ndarray, marker_ids: np.ndarray) -> int:
    return int(np.isin(seq, marker_ids).sum() % 2)


def label_pair_paraphrase(seq1: np.ndarray, seq2: np.ndarray) -> int:
    if len(seq1) != len(seq2) or len(seq1) == 0:
        return 0
    return int(np.mean(seq1 == seq2) > PARAPHRASE_MATCH_THRESHOLD)


def make_classification_task(corpus: Corpus, vocab: Vocab, task_kind: str, size: int,
                             seed: int) -> TaskDataset:
    """Balanced binary dataset with disjoint 80/10/10 splits.

    Labels come from functions that commute with any cipher/reorder
    transform: marker occurrence counts and positional match fractions are
    both invariant under bijective relabeling and shared permutations.
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task_kind!r}")
    # pairs consume up to 1.5 sentences per example; sentences are never reused,
    # keeping splits leak-free
    need = size if task_kind == "marker_parity" else (size * 3) // 2 + 8
    if len(corpus) < max(need, 16):
        raise ValueError(f"corpus with {len(corpus)} sentences is too small for {size} examples")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    sentences = [corpus[i] for i in order]

    marker_ids = None
    examples: list[TaskExample] = []
    if task_kind == "marker_parity":
        marker_ids = np.sort(rng.choice(np.arange(N_RESERVED, vocab.size), size=4, replace=False))
        si = 0
        for _ in range(size):
            sent = sentences[si % len(sentences)]
            si += 1
            body = sent[~np.isin(sent, marker_ids)]
            if len(body) < 4:
                continue
            label = len(examples) % 2
            if label == 1:
                pos = int(rng.integers(0, len(body) + 1))
                body = np.insert(body, pos, rng.choice(marker_ids))
            examples.append(TaskExample(seq1=body.astype(np.int32), seq2=None, label=label))
    else:
        si = 0
        for _ in range(size):
            seg1 = sentences[si % len(sentences)]
            si += 1
            seg1 = seg1[:14]
            if len(seg1) < 10:
                continue
            label = len(examples) % 2
            if label == 1:
                seg2 = seg1.copy()
                swap = rng.random(len(seg2)) < 0.2
                seg2[swap] = rng.choice(np.arange(N_RESERVED, vocab.size), size=int(swap.sum()))
                if label_pair_paraphrase(seg1, seg2) != 1:  # too many substitutions drawn
                    seg2 = seg1.copy()
            else:
                if rng.random() < 0.5:
                    other = sentences[si % len(sentences)]
                    si += 1
                    seg2 = other[:len(seg1)]
                    if len(seg2) < len(seg1):
                        seg2 = np.resize(other, len(seg1))
                else:
                    seg2 = seg1[rng.permutation(len(seg1))]
                if label_pair_paraphrase(seg1, seg2) != 0:  # rare accidental near-copy
                    seg2 = seg2[::-1].copy()
                    if label_pair_paraphrase(seg1, seg2) != 0:
                        continue
            examples.append(TaskExample(seq1=seg1.astype(np.int32), seq2=seg2.astype(np.int32),
                                        label=label))

    n = len(examples)
    n_test = max(1, n // 10)
    n_dev = max(1, n // 10)
    dataset = TaskDataset(kind=task_kind,
                          train=examples[: n - n_dev - n_test],
                          dev=examples[n - n_dev - n_test: n - n_test],
                          test=examples[n - n_test:],
                          marker_ids=marker_ids)
    for name, split in dataset.splits().items():
        ones = sum(e.label for e in split)
        if split and abs(ones / len(split) - 0.5) > 0.01 + 1.0 / len(split):
            raise AssertionError(f"{name} split imbalanced: {ones}/{len(split)}")
    return dataset


def transform_task(task: TaskDataset, spec: SyntheticLanguageSpec) -> TaskDataset:
    """Apply the language transform to every segment, keeping labels. The
    marker set maps through the cipher so the label function still commutes."""

    def tx(split):
        return [TaskExample(seq1=transform_sentence(e.seq1, spec),
                            seq2=None if e.seq2 is None else transform_sentence(e.seq2, spec),
                            label=e.label) for e in split]

    markers = None if task.marker_ids is None else np.sort(spec.cipher[task.marker_ids])
    return TaskDataset(kind=task.kind, train=tx(task.train), dev=tx(task.dev),
                       test=tx(task.test), num_classes=task.num_classes, marker_ids=markers)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, vocab: Vocab, path: Path):
    with open(path, "w", encoding="utf-8") as f:
        for sent in corpus:
            f.write(" ".join(vocab.token(int(t)) for t in sent) + "\n")


def load_corpus(path: Path, vocab: Vocab) -> Corpus:
    corpus = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            corpus.append(np.array([vocab.id(t) for t in line.split(" ")], dtype=np.int32))
    return corpus


def save_task(task: TaskDataset, vocab: Vocab, directory: Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, split in task.splits().items():
        with open(directory / f"{name}.tsv", "w", encoding="utf-8") as f:
            for e in split:
                cols = [str(e.label), " ".join(vocab.token(int(t)) for t in e.seq1)]
                if e.seq2 is not None:
                    cols.append(" ".join(vocab.token(int(t)) for t in e.seq2))
                f.write("\t".join(cols) + "\n")


def load_task(directory: Path, vocab: Vocab, kind: str) -> TaskDataset:
    splits = {}
    for name in ("train", "dev", "test"):
        examples = []
        for line in (Path(directory) / f"{name}.tsv").read_text(encoding="utf-8").splitlines():
            cols = line.split("\t")
            seq1 = np.array([vocab.id(t) for t in cols[1].split(" ")], dtype=np.int32)
            seq2 = None
            if len(cols) > 2:
                seq2 = np.array([vocab.id(t) for t in cols[2].split(" ")], dtype=np.int32)
            examples.append(TaskExample(seq1=seq1, seq2=seq2, label=int(cols[0])))
        splits[name] = examples
    return TaskDataset(kind=kind, **splits)
