"""Vocabulary, encoding, bag-of-signature and dataset construction."""

from collections import Counter

import pytest
from hypothesis import given, strategies as st

from binsem.corpus import (
    EOS,
    N_SPECIALS,
    PAD,
    SOS,
    SPECIALS,
    UNK,
    DatasetMeta,
    PairExample,
    Vocabulary,
    bos_cosine,
    build_vocab,
    class_balance,
    corpus_stats,
    decode,
    encode,
    extract_bos,
    filter_functions,
    file_hash,
    make_pairs,
    make_toolchain,
    oov_rate,
    pad_ids,
    pair_key,
    read_meta,
    read_rows,
    split,
    write_dataset,
)
from binsem.errors import SchemaError, ValidationError
from binsem.normalizer import NormalizedFunction, normalize_function


def nf(tokens, name="f", compiler="gcc", opt="O0", binary=None, consts=(), strings=()):
    return NormalizedFunction(tuple(tokens), binary or f"prog-{compiler}-{opt}", name, compiler, opt,
                              "suite", tuple(consts), tuple(strings))


@pytest.fixture(scope="module")
def fixture_nfs(fixture_records):
    return [normalize_function(r) for r in fixture_records]


# vocabulary -------------------------------------------------------------


def test_specials_and_frequency_order():
    vocab = build_vocab([nf(["b", "a", "c", "a", "b"]), nf(["a", "d"])])
    assert vocab.token_of[:N_SPECIALS] == list(SPECIALS)
    assert vocab.token_of[N_SPECIALS:] == ["a", "b", "c", "d"]
    assert vocab.counts == {"a": 3, "b": 2, "c": 1, "d": 1}
    for i in range(len(vocab)):
        assert vocab.id_of[vocab.token_of[i]] == i


def test_tsv_round_trip_and_hash():
    vocab = build_vocab([nf(["x", "y", "y"])])
    text = vocab.to_tsv()
    assert text.splitlines()[:5] == [f"{s}\t0" for s in SPECIALS]
    again = Vocabulary.from_tsv(text)
    assert again.token_of == vocab.token_of and again.counts == vocab.counts
    assert again.hash == vocab.hash
    assert build_vocab([nf(["x", "y"])]).hash != vocab.hash


def test_tsv_rejects_bad_specials():
    with pytest.raises(SchemaError):
        Vocabulary.from_tsv("[UNK]\t0\n[PAD]\t0\n[MASK]\t0\n[SOS]\t0\n[EOS]\t0\n")
    with pytest.raises(SchemaError):
        Vocabulary.from_tsv("\n".join(f"{s}\t0" for s in SPECIALS) + "\nfoo\tbar\n")


@given(st.lists(st.lists(st.sampled_from("abcdefghij"), max_size=20), max_size=10))
def test_vocab_bijection_property(token_lists):
    vocab = build_vocab([nf(t) for t in token_lists])
    assert len(set(vocab.token_of)) == len(vocab)
    assert not set(SPECIALS) & set(vocab.counts)
    counts = [vocab.counts[t] for t in vocab.token_of[N_SPECIALS:]]
    assert counts == sorted(counts, reverse=True)


# encoding ---------------------------------------------------------------


def test_encode_layout():
    vocab = build_vocab([nf(["a", "b"])])
    seq = encode(["a", "b", "zzz"], vocab, 8)
    assert seq.ids.tolist() == [SOS, vocab.id_of["a"], vocab.id_of["b"], UNK, EOS, PAD, PAD, PAD]
    assert seq.true_len == 5
    assert decode(seq, vocab) == ["a", "b", "[UNK]"]
    with pytest.raises(ValidationError):
        encode(["a"] * 7, vocab, 8)


@given(st.lists(st.sampled_from(["a", "b", "c", "q"]), max_size=30), st.integers(32, 64))
def test_sequence_invariants(tokens, max_seq):
    vocab = build_vocab([nf(["a", "b", "c"])])
    seq = encode(tokens, vocab, max_seq)
    assert len(seq.ids) == max_seq
    assert seq.ids[0] == SOS and seq.ids[seq.true_len - 1] == EOS
    assert (seq.ids[seq.true_len:] == PAD).all()
    assert (seq.ids[:seq.true_len] != PAD).all()
    assert pad_ids(seq.ids[:seq.true_len].tolist(), max_seq) == seq


def test_filter_bounds():
    nfs = [nf(["t"] * n) for n in (5, 6, 250, 251)]
    assert [len(x.tokens) for x in filter_functions(nfs)] == [6, 250]


# statistics -------------------------------------------------------------


def test_corpus_stats(fixture_nfs, fixture_records):
    stats = corpus_stats(fixture_nfs, fixture_records, heldout=fixture_nfs[:5])
    assert stats["n_functions"] == len(fixture_nfs)
    assert stats["n_tokens"] == sum(len(x.tokens) for x in fixture_nfs)
    assert stats["rank_freq"][0]["rank"] == 1
    assert stats["rank_freq"][-1]["cumulative"] == pytest.approx(1.0)
    assert stats["oov_rate"] == 0.0
    assert stats["bf_stats"]["mean"] >= 1 and stats["ib_stats"]["mean"] >= 1


def test_oov_rate():
    assert oov_rate([nf(["a", "b"])], [nf(["a", "c", "c", "d"])]) == pytest.approx(2 / 3)


# bag of signature -------------------------------------------------------


def test_bos_worked_example():
    v = Counter({"k1": 1, "k2": 1, "k3": 3, "k4": 1})
    w = Counter({"k2": 1, "k3": 2, "k4": 1})
    assert bos_cosine(v, w) == pytest.approx(0.9428, abs=1e-3)


def test_bos_tags_numbers_and_strings():
    bag = extract_bos(nf(["a"], consts=(72, 72), strings=("72",)))
    assert bag == Counter({("num", 72): 2, ("str", "72"): 1})
    assert bos_cosine(bag, Counter()) == 0.0


bag_st = st.dictionaries(st.integers(0, 12), st.integers(1, 5), max_size=8).map(Counter)


@given(bag_st, bag_st)
def test_bos_symmetry_and_bounds(v, w):
    s = bos_cosine(v, w)
    assert s == bos_cosine(w, v)
    assert 0.0 <= s <= 1.0
    if v:
        assert bos_cosine(v, v) == pytest.approx(1.0)


# fine-tuning datasets ---------------------------------------------------


def test_pair_key():
    assert pair_key(("gcc", "O3"), ("clang", "O0")) == "(CO0,GO3)"
    assert pair_key(("clang", "O0"), ("gcc", "O3")) == "(CO0,GO3)"


def test_make_pairs_labels(fixture_nfs):
    pairs = make_pairs(fixture_nfs, rng_seed=3)
    pos = [p for p in pairs if p.label == 1]
    neg = [p for p in pairs if p.label == 0]
    assert pos and abs(len(pos) - len(neg)) <= 1
    key = {x.tokens: x for x in fixture_nfs}
    for p in pos:
        a, b = key[p.a], key[p.b]
        assert a.function_name == b.function_name and a.build != b.build
    for p in neg:
        assert p.a != p.b
    assert all(0 <= p.bos_sim <= 1 for p in pairs)
    assert all(p.group.startswith("(") for p in pairs)
    assert make_pairs(fixture_nfs, rng_seed=3) == pairs


def test_make_pairs_needs_positive():
    with pytest.raises(ValidationError, match="no positive"):
        make_pairs([nf(["a"] * 6, name="f"), nf(["b"] * 6, name="g")])


def test_make_toolchain_rules():
    nfs = [
        nf(["a"] * 6, "f", "gcc", "O0"),
        nf(["a"] * 6, "g", "gcc", "O0"),    # duplicate, kept once
        nf(["b"] * 6, "f", "gcc", "O2"),    # O2 excluded
        nf(["c"] * 6, "f", "clang", "O1"),
        nf(["c"] * 6, "h", "gcc", "O1"),    # same tokens, other compiler: conflict for compiler task
        nf(["d"] * 6, "f", "clang", "O3"),
        nf(["e"] * 6, "x", "gcc", "O3"),
    ]
    opt = make_toolchain(nfs, "optlevel")
    assert sorted(ex.label_name for ex in opt) == ["O0", "O1", "O3", "O3"]
    comp = make_toolchain(nfs, "compiler")
    assert sorted(ex.label_name for ex in comp) == ["clang", "gcc", "gcc", "gcc"]
    assert all(ex.x != ("c",) * 6 for ex in comp)
    gcc_only = make_toolchain([x for x in nfs if x.opt_level != "O1"] + [nf(["z"] * 6, "q", "gcc", "O1")],
                              "optlevel_gcc")
    assert class_balance(gcc_only, ("O0", "O1", "O3")) == {"O0": 1, "O1": 1, "O3": 1}
    with pytest.raises(ValidationError, match="class"):
        make_toolchain(nfs[:2], "compiler")


@given(st.integers(0, 200), st.integers(0, 2 ** 32 - 1))
def test_split_sizes_and_partition(n, seed):
    data = list(range(n))
    train, valid, test = split(data, (0.9, 0.05, 0.05), seed)
    assert sorted(train + valid + test) == data
    for part, r in zip((train, valid, test), (0.9, 0.05, 0.05)):
        assert abs(len(part) - r * n) < 1


def test_split_rejects_bad_ratios():
    with pytest.raises(ValidationError):
        split([1, 2], (0.5, 0.6, 0.1))


def test_dataset_files(tmp_path):
    vocab = build_vocab([nf(["a", "b"])])
    ex = [PairExample(("a",), ("b", "a"), 0.5, 1, "(CO0,GO3)")]
    meta = DatasetMeta("binsim", ["dissimilar", "similar"], vocab.hash, 16)
    write_dataset(tmp_path, {"train": ex, "valid": [], "test": ex}, meta, vocab)
    rows = read_rows(tmp_path / "train.jsonl")
    assert rows == [{"a": [SOS, vocab.id_of["a"], EOS], "b": [SOS, vocab.id_of["b"], vocab.id_of["a"], EOS],
                     "bos_sim": 0.5, "label": 1, "group": "(CO0,GO3)"}]
    back = read_meta(tmp_path)
    assert back.counts == {"train": 1, "valid": 0, "test": 1} and back.vocab_hash == vocab.hash
    assert len(file_hash(tmp_path / "train.jsonl")) == 64
    (tmp_path / "bad.jsonl").write_text('{"label": 1}\n')
    with pytest.raises(SchemaError):
        read_rows(tmp_path / "bad.jsonl")
