"""Vocabulary, sequence encoding, corpus statistics, BoS and fine-tuning datasets."""

import hashlib
import itertools
import json
import math
import os
import re
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError, ValidationError

SPECIALS = ("[PAD]", "[UNK]", "[MASK]", "[SOS]", "[EOS]")
PAD, UNK, MASK, SOS, EOS = range(5)
N_SPECIALS = len(SPECIALS)

MIN_TOKENS_EXCLUSIVE = 5
MAX_TOKENS = 250

TOOLCHAIN_TASKS = ("compiler", "optlevel", "optlevel_gcc", "optlevel_clang")
COMPILER_CLASSES = ("gcc", "clang")
OPT_CLASSES = ("O0", "O1", "O3")


def filter_functions(nfs, min_exclusive=MIN_TOKENS_EXCLUSIVE, max_inclusive=MAX_TOKENS):
    """Keep functions with ``min_exclusive < len(tokens) <= max_inclusive``."""
    return [nf for nf in nfs if min_exclusive < len(nf.tokens) <= max_inclusive]


# --------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Token <-> id bijection; ids 0-4 are the special tokens."""

    def __init__(self, tokens=(), counts=None):
        self.token_of = list(SPECIALS) + list(tokens)
        self.id_of = {t: i for i, t in enumerate(self.token_of)}
        if len(self.id_of) != len(self.token_of):
            raise ValidationError("duplicate token in vocabulary")
        self.counts = dict(counts or {})

    def __len__(self):
        return len(self.token_of)

    def __contains__(self, token):
        return token in self.id_of

    def lookup(self, token):
        return self.id_of.get(token, UNK)

    def to_tsv(self):
        lines = [f"{s}\t0" for s in SPECIALS]
        lines += [f"{t}\t{self.counts.get(t, 0)}" for t in self.token_of[N_SPECIALS:]]
        return "\n".join(lines) + "\n"

    @property
    def hash(self):
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fp:
            fp.write(self.to_tsv())

    @classmethod
    def from_tsv(cls, text):
        rows = [line.split("\t") for line in text.splitlines() if line]
        for i, row in enumerate(rows[:N_SPECIALS]):
            if row[0] != SPECIALS[i]:
                raise SchemaError(f"vocabulary line {i} must be {SPECIALS[i]}", line=i + 1)
        if len(rows) < N_SPECIALS:
            raise SchemaError("vocabulary is missing special tokens")
        tokens, counts = [], {}
        for i, row in enumerate(rows[N_SPECIALS:], start=N_SPECIALS + 1):
            if len(row) != 2 or not row[1].isdigit():
                raise SchemaError("expected 'token<TAB>count'", line=i)
            tokens.append(row[0])
            counts[row[0]] = int(row[1])
        return cls(tokens, counts)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fp:
            return cls.from_tsv(fp.read())


def build_vocab(nfs):
    """Ids by descending frequency, ties broken lexicographically."""
    counts = Counter()
    for nf in nfs:
        counts.update(nf.tokens)
    for s in SPECIALS:
        counts.pop(s, None)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(ordered, counts)


# --------------------------------------------------------------------------
# encoding


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    true_len: int

    def __eq__(self, other):
        return (isinstance(other, TokenSequence) and self.true_len == other.true_len
                and np.array_equal(self.ids, other.ids))

    def __hash__(self):
        return hash((self.true_len, self.ids.tobytes()))


def encode(tokens, vocab, max_seq):
    """[SOS] + ids + [EOS], padded with [PAD] to ``max_seq``."""
    tokens = getattr(tokens, "tokens", tokens)
    if len(tokens) > max_seq - 2:
        raise ValidationError(f"sequence of {len(tokens)} tokens exceeds max_seq - 2 = {max_seq - 2}")
    ids = np.full(max_seq, PAD, dtype=np.int64)
    ids[0] = SOS
    ids[1:len(tokens) + 1] = [vocab.lookup(t) for t in tokens]
    ids[len(tokens) + 1] = EOS
    return TokenSequence(ids, len(tokens) + 2)


def decode(seq, vocab):
    return [vocab.token_of[i] for i in seq.ids[1:seq.true_len - 1]]


def pad_ids(ids, max_seq):
    """TokenSequence from an unpadded id list that already carries SOS/EOS."""
    if len(ids) > max_seq:
        raise ValidationError(f"sequence of length {len(ids)} exceeds max_seq {max_seq}")
    arr = np.full(max_seq, PAD, dtype=np.int64)
    arr[:len(ids)] = ids
    return TokenSequence(arr, len(ids))


# --------------------------------------------------------------------------
# statistics


def _summary(values):
    if not values:
        return None
    return {
        "mean": statistics.fmean(values),
        "median": statistics.median(values),
        "std": statistics.pstdev(values),
        "n": len(values),
    }


def oov_rate(train_nfs, test_nfs):
    """Fraction of distinct test tokens never seen in training."""
    seen = {t for nf in train_nfs for t in nf.tokens}
    test = {t for nf in test_nfs for t in nf.tokens}
    if not test:
        return 0.0
    return len(test - seen) / len(test)


def corpus_stats(nfs, records=None, heldout=None):
    counts = Counter()
    for nf in nfs:
        counts.update(nf.tokens)
    total = sum(counts.values())
    rank_freq, cum = [], 0
    for rank, (tok, c) in enumerate(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])), start=1):
        cum += c
        rank_freq.append({"rank": rank, "token": tok, "count": c,
                          "ratio": c / total, "cumulative": cum / total})

    bf, ib = [], []
    for rec in records or ():
        blocks = Counter(ins.bb for ins in rec.instructions if ins.bb is not None)
        if blocks:
            bf.append(len(blocks))
            ib.extend(blocks.values())
    return {
        "n_functions": len(nfs),
        "n_tokens": total,
        "n_distinct": len(counts),
        "rank_freq": rank_freq,
        "oov_rate": None if heldout is None else oov_rate(nfs, heldout),
        "if_stats": _summary([len(nf.tokens) for nf in nfs]),
        "bf_stats": _summary(bf),
        "ib_stats": _summary(ib),
    }


# --------------------------------------------------------------------------
# bag of signature


def extract_bos(f):
    """Multiset of numeric constants and string literals of a function.

    Keys are tagged ``("num", value)`` / ``("str", text)`` so that 72 and "72"
    stay distinct.
    """
    bag = Counter(("num", int(c)) for c in f.bos_consts)
    bag.update(("str", s) for s in f.bos_strings)
    return bag


def bos_cosine(v, w):
    if not v or not w:
        return 0.0
    dot = sum(c * w[k] for k, c in v.items() if k in w)
    nv = math.sqrt(sum(c * c for c in v.values()))
    nw = math.sqrt(sum(c * c for c in w.values()))
    return min(1.0, max(0.0, dot / (nv * nw)))


# --------------------------------------------------------------------------
# fine-tuning datasets


@dataclass(frozen=True)
class PairExample:
    a: tuple
    b: tuple
    bos_sim: float
    label: int
    group: str = ""


@dataclass(frozen=True)
class ToolchainExample:
    x: tuple
    label: int
    label_name: str = ""
    group: str = ""


def build_tag(compiler, opt_level):
    """``("clang", "O0") -> "CO0"``."""
    return f"{compiler[:1].upper()}{opt_level}"


def pair_key(build_a, build_b):
    """Group key such as ``"(CO0,GO3)"``; order independent."""
    return "(" + ",".join(sorted([build_tag(*build_a), build_tag(*build_b)])) + ")"


def binary_root(nf):
    root = nf.binary_id
    for sep in "-_.":
        suffix = f"{sep}{nf.compiler}{sep}{nf.opt_level}"
        if root.endswith(suffix):
            return root[: -len(suffix)]
    return re.sub(r"[-_.](gcc|clang)[-_.]?O[0-3s]$", "", root)


def function_identity(nf):
    return (nf.testsuite, binary_root(nf), nf.function_name)


def make_pairs(nfs, ratio_pos=0.5, rng_seed=0, max_positives=None):
    """Labelled function pairs for similarity fine-tuning.

    Positives: the same function built with two different configurations
    whose token lists differ. Negatives: uniformly sampled pairs of different
    functions, ``ratio_pos : 1 - ratio_pos`` against the positives.
    """
    if not 0 < ratio_pos < 1:
        raise ValidationError("ratio_pos must lie in (0, 1)")
    rng = np.random.default_rng(rng_seed)
    bags = [extract_bos(nf) for nf in nfs]
    groups = defaultdict(list)
    for i, nf in enumerate(nfs):
        groups[function_identity(nf)].append(i)

    positives = []
    for members in groups.values():
        for i, j in itertools.combinations(members, 2):
            if nfs[i].build != nfs[j].build and nfs[i].tokens != nfs[j].tokens:
                positives.append((i, j))
    if not positives:
        raise ValidationError("no positive pair available")
    if max_positives is not None and len(positives) > max_positives:
        keep = rng.choice(len(positives), size=max_positives, replace=False)
        positives = [positives[k] for k in sorted(keep)]

    n_neg = round(len(positives) * (1 - ratio_pos) / ratio_pos)
    identities = [function_identity(nf) for nf in nfs]
    negatives, seen = [], set()
    attempts = 0
    while len(negatives) < n_neg and attempts < 50 * max(n_neg, 1):
        attempts += 1
        i, j = (int(x) for x in rng.integers(0, len(nfs), size=2))
        if identities[i] == identities[j] or nfs[i].tokens == nfs[j].tokens:
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        negatives.append((i, j))

    out = []
    for label, pairs in ((1, positives), (0, negatives)):
        for i, j in pairs:
            a, b = nfs[i], nfs[j]
            out.append(PairExample(a.tokens, b.tokens, bos_cosine(bags[i], bags[j]), label,
                                   pair_key(a.build, b.build)))
    order = rng.permutation(len(out))
    return [out[k] for k in order]


def toolchain_classes(task):
    if task == "compiler":
        return COMPILER_CLASSES
    if task in ("optlevel", "optlevel_gcc", "optlevel_clang"):
        return OPT_CLASSES
    raise ValidationError(f"unknown toolchain task {task!r}")


def make_toolchain(nfs, task):
    """Labelled single-function examples for compiler / optimization-level tasks.

    O2 is excluded from optimization-level tasks. A token list seen under two
    different labels is dropped entirely; exact duplicates are kept once.
    """
    classes = toolchain_classes(task)
    labelled = []
    for nf in nfs:
        if task == "compiler":
            name = nf.compiler
        else:
            if task == "optlevel_gcc" and nf.compiler != "gcc":
                continue
            if task == "optlevel_clang" and nf.compiler != "clang":
                continue
            name = nf.opt_level
        if name not in classes:
            continue
        labelled.append((nf, name))

    labels_of = defaultdict(set)
    for nf, name in labelled:
        labels_of[nf.tokens].add(name)
    out, seen = [], set()
    for nf, name in labelled:
        if len(labels_of[nf.tokens]) > 1 or nf.tokens in seen:
            continue
        seen.add(nf.tokens)
        out.append(ToolchainExample(nf.tokens, classes.index(name), name, build_tag(*nf.build)))
    balance = class_balance(out, classes)
    for name, n in balance.items():
        if n == 0:
            raise ValidationError(f"class {name} empty")
    return out


def class_balance(examples, classes):
    c = Counter(ex.label for ex in examples)
    return {name: c.get(i, 0) for i, name in enumerate(classes)}


def split(dataset, ratios=(0.90, 0.05, 0.05), rng_seed=0):
    """Shuffle and cut into (train, valid, test) by the largest-remainder rule."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValidationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(dataset)
    exact = [r * n for r in ratios]
    sizes = [math.floor(x) for x in exact]
    by_remainder = sorted(range(3), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in by_remainder[: n - sum(sizes)]:
        sizes[k] += 1
    order = np.random.default_rng(rng_seed).permutation(n)
    items = [dataset[k] for k in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return items[:a], items[a:b], items[b:]


# --------------------------------------------------------------------------
# dataset files


@dataclass
class DatasetMeta:
    task: str
    classes: list
    vocab_hash: str
    max_seq: int
    counts: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def _encode_ids(tokens, vocab, max_seq):
    seq = encode(tokens, vocab, max_seq)
    return seq.ids[: seq.true_len].tolist()


def example_to_row(ex, vocab, max_seq):
    if isinstance(ex, PairExample):
        return {"a": _encode_ids(ex.a, vocab, max_seq), "b": _encode_ids(ex.b, vocab, max_seq),
                "bos_sim": ex.bos_sim, "label": ex.label, "group": ex.group}
    return {"x": _encode_ids(ex.x, vocab, max_seq), "label": ex.label, "group": ex.group}


def write_dataset(out_dir, splits, meta, vocab):
    """Write train/valid/test JSONL (token-id arrays with SOS/EOS) and meta.json."""
    os.makedirs(out_dir, exist_ok=True)
    meta.counts = {}
    for name, examples in splits.items():
        path = os.path.join(out_dir, f"{name}.jsonl")
        with open(path, "w", encoding="utf-8") as fp:
            for ex in examples:
                fp.write(json.dumps(example_to_row(ex, vocab, meta.max_seq), separators=(",", ":")) + "\n")
        meta.counts[name] = len(examples)
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fp:
        json.dump(meta.to_dict(), fp, indent=2, sort_keys=True)


def read_meta(dataset_dir):
    path = os.path.join(dataset_dir, "meta.json")
    if not os.path.exists(path):
        raise ValidationError(f"dataset directory {dataset_dir} has no meta.json")
    with open(path, encoding="utf-8") as fp:
        return DatasetMeta(**json.load(fp))


def read_rows(path):
    rows = []
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"malformed JSON: {e.msg}", line=lineno) from None
            if "label" not in row or not (("a" in row and "b" in row) or "x" in row):
                raise SchemaError("dataset row needs label and a/b or x", line=lineno)
            rows.append(row)
    return rows


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
