import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milkstream.data import (BOS, EOS, PAD, UNK, TaskSpec, Vocabulary, generate_corpus,
                             generate_pair, load_parallel_corpus, make_batches, pad_batch)
from milkstream.errors import FormatError, InvalidArgument

VOCAB = Vocabulary.synthetic(32)


def test_synthetic_vocabulary_layout():
    assert len(VOCAB) == 32
    assert VOCAB.itos[:4] == ["<pad>", "<s>", "</s>", "<unk>"]
    assert VOCAB.stoi["E"] == 4 and VOCAB.stoi["L"] == 5
    assert len(VOCAB.content_ids) == 26
    with pytest.raises(InvalidArgument):
        Vocabulary.synthetic(6)


def test_vocabulary_file_ids_are_line_plus_four(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("hello\nworld\n")
    v = Vocabulary.load(path)
    assert v.stoi["hello"] == 4 and v.stoi["world"] == 5
    VOCAB.save(path)
    assert Vocabulary.load(path) == VOCAB
    assert path.read_text().splitlines()[0] == "E"


def test_encode_decode():
    ids = VOCAB.encode(["a", "b", "zz"])
    assert ids == [VOCAB.stoi["a"], VOCAB.stoi["b"], UNK, EOS]
    assert VOCAB.decode(ids) == ["a", "b", "<unk>"]
    assert VOCAB.decode([VOCAB.stoi["c"], EOS, VOCAB.stoi["a"]]) == ["c"]
    with pytest.raises(InvalidArgument):
        Vocabulary(["x", "x"])


def _toks(ids):
    return VOCAB.decode(ids, strip_eos=False)


def _pair_for(kind, predicate):
    spec = TaskSpec(kind=kind, min_len=3, max_len=3)
    for i in range(200):
        src, tgt = generate_pair(spec, i, VOCAB)
        if predicate(src):
            return src, tgt
    raise AssertionError("no matching pair")


def test_copy_example():
    src, tgt = generate_pair(TaskSpec(kind="copy", min_len=3, max_len=3), 0, VOCAB)
    assert src == tgt and len(src) == 4 and src[-1] == EOS


def test_rotate_example():
    src, tgt = generate_pair(TaskSpec(kind="rotate", min_len=3, max_len=3), 0, VOCAB)
    a, b, c = _toks(src)[:3]
    assert _toks(tgt) == [b, c, a, "</s>"]


def test_marker_examples():
    src, tgt = _pair_for("marker_lookahead", lambda s: s[0] == VOCAB.stoi["L"])
    _, a, b, c, _ = _toks(src)
    assert _toks(tgt) == [c, a, b, "</s>"]
    src, tgt = _pair_for("marker_lookahead", lambda s: s[0] == VOCAB.stoi["E"])
    assert tgt == src[1:]


def test_task_validation():
    with pytest.raises(InvalidArgument):
        TaskSpec(kind="reverse")
    with pytest.raises(InvalidArgument):
        TaskSpec(min_len=5, max_len=4)
    with pytest.raises(InvalidArgument):
        TaskSpec(lookahead_fraction=1.5)


def test_corpus_is_deterministic_and_balanced():
    spec = TaskSpec()
    a = generate_corpus(spec, 2000)
    assert a == generate_corpus(spec, 2000)
    assert a[100:110] == generate_corpus(spec, 10, start=100)
    frac = sum(s[0] == VOCAB.stoi["L"] for s, _ in a) / len(a)
    assert 0.45 < frac < 0.55
    assert generate_corpus(TaskSpec(seed=1), 5) != a[:5]


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(["copy", "rotate", "marker_lookahead"]), st.integers(0, 10 ** 6),
       st.integers(0, 3), st.integers(1, 10), st.integers(0, 5))
def test_pair_properties(kind, index, seed, lo, span):
    spec = TaskSpec(kind=kind, min_len=lo, max_len=lo + span, seed=seed)
    src, tgt = generate_pair(spec, index, VOCAB)
    content = src[1:-1] if kind == "marker_lookahead" else src[:-1]
    assert lo <= len(content) <= lo + span
    assert src[-1] == EOS and tgt[-1] == EOS
    assert all(t in VOCAB.content_ids for t in content)
    # every task is a permutation of the content symbols
    assert sorted(tgt[:-1]) == sorted(content)
    assert BOS not in src + tgt and PAD not in src + tgt


def test_parallel_corpus(tmp_path):
    (tmp_path / "s").write_text("a b\nc\n")
    (tmp_path / "t").write_text("b a\nc\n")
    pairs = load_parallel_corpus(tmp_path / "s", tmp_path / "t", VOCAB)
    assert pairs[1] == ([VOCAB.stoi["c"], EOS], [VOCAB.stoi["c"], EOS])
    (tmp_path / "t").write_text("b a\n")
    with pytest.raises(FormatError) as exc:
        load_parallel_corpus(tmp_path / "s", tmp_path / "t", VOCAB)
    assert exc.value.line == 2


def test_pad_batch():
    b = pad_batch([([7, 8, EOS], [9, EOS]), ([7, EOS], [9, 9, 9, EOS])])
    assert b.src.tolist() == [[7, 8, EOS], [7, EOS, PAD]]
    assert b.tgt_lens.tolist() == [2, 4]
    assert b.src_mask.tolist() == [[True, True, True], [True, True, False]]
    assert b.tgt_mask.sum().item() == 6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 16), st.one_of(st.none(), st.integers(0, 100)))
def test_batches_partition_the_corpus(n, size, seed):
    pairs = generate_corpus(TaskSpec(kind="copy", min_len=1, max_len=4), n)
    batches = make_batches(pairs, size, seed)
    assert [b.size for b in batches[:-1]] == [size] * (len(batches) - 1)
    seen = sorted(tuple(b.src[r, :b.src_lens[r]].tolist()) for b in batches for r in range(b.size))
    assert seen == sorted(tuple(s) for s, _ in pairs)
    if seed is None:
        assert batches[0].src[0, :batches[0].src_lens[0]].tolist() == pairs[0][0]
    with pytest.raises(InvalidArgument):
        make_batches(pairs, 0)
