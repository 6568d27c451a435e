import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarcheck.data import (MASK, PAD, UNK, SyntheticSpec, class_scores, detokenize,
                             generate_synthetic, lexicon, load_corpus, save_corpus, split, tokenize)


def test_reserved_ids():
    assert (PAD, UNK, MASK) == (0, 1, 2)


def test_one_row_round_trip(tmp_path):
    path = tmp_path / "one.tsv"
    path.write_text("good good film\t1\n")
    c = load_corpus(path)
    assert c.decode(c.examples[0].ids) == "good good <unk>"
    out = tmp_path / "again.tsv"
    save_corpus(c, out)
    c2 = load_corpus(out, vocab=c.vocab)
    np.testing.assert_array_equal(c2.examples[0].ids, c.examples[0].ids)
    assert c2.examples[0].label == 1


def test_unseen_eval_token_maps_to_unk(tmp_path):
    (tmp_path / "train.tsv").write_text("a b\t0\na b\t1\n")
    (tmp_path / "test.tsv").write_text("a zebra\t0\n")
    train = load_corpus(tmp_path / "train.tsv")
    test = load_corpus(tmp_path / "test.tsv", vocab=train.vocab)
    assert test.examples[0].ids.tolist() == [train.vocab.index("a"), UNK]


def test_vocab_size_on_crafted_file(tmp_path):
    rows = ["the cat sat", "the dog sat", "The Cat ran", "a bird", "a fish",
            "dog dog", "owl", "the end", "fin", "sat down"]
    path = tmp_path / "ten.tsv"
    path.write_text("".join(f"{r}\t{i % 2}\n" for i, r in enumerate(rows)))
    # hand count of tokens seen at least twice: the(4) cat(2) sat(3) dog(3) a(2)
    assert len(load_corpus(path).vocab) == 3 + 5


def test_only_unk_example_is_kept_and_flagged(tmp_path):
    path = tmp_path / "u.tsv"
    path.write_text("x x\t0\nnever seen\t1\n")
    c = load_corpus(path)
    assert len(c) == 2
    assert c.examples[1].only_unk
    assert c.meta["only_unk"] == [c.examples[1].uid]


def test_jsonl_and_errors(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"text": "hi hi", "label": 1}) + "\n")
    assert load_corpus(path, "jsonl").examples[0].label == 1
    bad = tmp_path / "bad.tsv"
    bad.write_text("fine\t0\nno label here\n")
    with pytest.raises(ValueError, match=":2:"):
        load_corpus(bad)
    rng = tmp_path / "range.tsv"
    rng.write_text("a\t0\nb\t5\n")
    with pytest.raises(ValueError, match="out of range"):
        load_corpus(rng, num_classes=2)


def test_all_positive_sequence_gets_positive_label():
    spec = SyntheticSpec(n_examples=200, seed=3)
    words, owner, mag = lexicon(spec)
    c = generate_synthetic(spec)
    pos_ids = {i + 3 for i, o in enumerate(owner) if o == 1}
    neg_ids = {i + 3 for i, o in enumerate(owner) if o == 0}
    seen = 0
    for ex in c:
        toks = set(ex.ids.tolist())
        if toks & pos_ids and not toks & neg_ids:
            assert ex.label == 1
            seen += 1
    assert seen > 0


def test_fixed_seed_reproducible():
    a = generate_synthetic(SyntheticSpec(n_examples=50, seed=11))
    b = generate_synthetic(SyntheticSpec(n_examples=50, seed=11))
    for x, y in zip(a, b):
        assert x.label == y.label and np.array_equal(x.ids, y.ids)
        assert np.array_equal(x.polarity, y.polarity)


def test_class_balance_over_10k():
    c = generate_synthetic(SyntheticSpec(n_examples=10_000, seed=0, num_classes=4))
    frac = np.bincount([ex.label for ex in c], minlength=4) / len(c)
    assert np.all(np.abs(frac - 0.25) <= 0.05)


def test_labels_follow_lexicon_rule_with_margin():
    spec = SyntheticSpec(n_examples=300, seed=5, num_classes=3, margin=0.7)
    words, owner, mag = lexicon(spec)
    owner_by_id = np.concatenate([[-1] * 3, owner])
    mag_by_id = np.concatenate([[0.0] * 3, mag])
    for ex in generate_synthetic(spec):
        s = class_scores(ex.ids, owner_by_id, mag_by_id, 3)
        top = np.sort(s)[::-1]
        assert np.argmax(s) == ex.label and top[0] - top[1] >= 0.7
        expect = np.where(owner_by_id[ex.ids] < 0, 0, np.where(owner_by_id[ex.ids] == ex.label, 1, -1))
        np.testing.assert_array_equal(ex.polarity, expect)


def test_synthetic_export_writes_polarity_sidecar(tmp_path):
    c = generate_synthetic(SyntheticSpec(n_examples=5, seed=1))
    save_corpus(c, tmp_path / "s.jsonl", fmt="jsonl")
    tags = [json.loads(line) for line in open(str(tmp_path / "s.jsonl") + ".polarity.jsonl")]
    assert [len(t) for t in tags] == [len(ex.ids) for ex in c]


def test_margin_must_be_positive():
    with pytest.raises(ValueError):
        SyntheticSpec(margin=0.0)


def test_split_cases():
    c = generate_synthetic(SyntheticSpec(n_examples=100, seed=0))
    tr, va, te = split(c, (1, 0, 0), 0)
    assert (len(tr), len(va), len(te)) == (100, 0, 0)
    tr, va, te = split(c, (0.8, 0.1, 0.1), 4)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    uids = [ex.uid for part in (tr, va, te) for ex in part]
    assert sorted(uids) == sorted(ex.uid for ex in c)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=6), min_size=1, max_size=10))
def test_tokenize_detokenize_identity(words):
    text = "  ".join(words)
    assert detokenize(tokenize(text)) == " ".join(text.split())


def test_noise_free_corpus_is_separable_by_rule():
    spec = SyntheticSpec(n_examples=400, seed=9)
    words, owner, mag = lexicon(spec)
    owner_by_id = np.concatenate([[-1] * 3, owner])
    mag_by_id = np.concatenate([[0.0] * 3, mag])
    pred = [int(np.argmax(class_scores(ex.ids, owner_by_id, mag_by_id, 2)))
            for ex in generate_synthetic(spec)]
    assert pred == [ex.label for ex in generate_synthetic(spec)]
