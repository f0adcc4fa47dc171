from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loghive.device import DEFAULT_TEMPLATES, generate_corpus
from loghive.pipeline import (
    VAR,
    CompressedBatch,
    CorruptBatchError,
    DevicePipeline,
    PipelineError,
    Record,
    TemplateDictionary,
    compress,
    compression_ratio,
    decompress,
    deserialize_batch,
    learn_templates,
    serialize_batch,
    tokenize,
)

words = st.sampled_from(["error", "link", "down", "up", "eth0", "root", "42", "é", "<x>", "&"])
blank = st.sampled_from([" ", "  ", "\t", " \t "])
lines = st.lists(
    st.tuples(st.sampled_from(["", " ", "\t"]), st.lists(st.tuples(words, blank), min_size=0, max_size=8),
              words, st.sampled_from(["", " ", "  "])),
    min_size=1, max_size=40,
).map(lambda rows: ["".join([lead, *(w + s for w, s in mid), last, trail]) for lead, mid, last, trail in rows])
any_lines = st.lists(st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\n\r\x0b\x0c\x1c\x1d\x1e\x85  "), max_size=40),
                     min_size=1, max_size=30)


def brute_fixed(corpus, theta):
    # independent oracle: share of lines containing each token
    counts = Counter()
    for line in corpus:
        counts.update(set(line.split()))
    return {t for t, c in counts.items() if c / len(corpus) >= theta and t != VAR}


def test_tokenize_keeps_whitespace_runs():
    assert tokenize("a  b\tc") == (["a", "b", "c"], ["", "  ", "\t", ""])
    assert tokenize("  lead") == (["lead"], ["  ", ""])
    assert tokenize("") == ([""], ["", ""])


def test_server_down_example():
    d = learn_templates(["Server alpha is down", "Server beta is down"], theta=0.6)
    assert [d.template_text(t) for t in d.templates] == ["Server ::: is down"]
    batch = compress(["Server alpha is down", "Server beta is down"], d)
    assert [r.variables for r in batch.records] == [("alpha",), ("beta",)]
    assert [r.positions for r in batch.records] == [(7,), (7,)]


def test_single_line_corpus_is_all_fixed():
    d = learn_templates(["User root is connected in terminal tty1"], theta=0.5)
    assert d.templates == {0: ("User", "root", "is", "connected", "in", "terminal", "tty1")}
    assert compress(["User root is connected in terminal tty1"], d).records[0].variables == ()


def test_theta_one_requires_every_line():
    corpus = ["error disk 1", "error fan 2", "error psu 3"]
    d = learn_templates(corpus, theta=1.0)
    assert d.fixed_tokens() == {"error"}
    d = learn_templates(corpus + ["warning fan 4"], theta=1.0)
    assert d.fixed_tokens() == set()


def test_identical_lines_differ_only_in_line_number():
    corpus = ["link eth0 down", "link eth1 down", "link eth0 down"]
    batch = compress(corpus, learn_templates(corpus, 0.5), first_line=10)
    a, _, c = batch.records
    assert (a.template_id, a.variables) == (c.template_id, c.variables)
    assert (a.line_no, c.line_no) == (10, 12)


def test_template_ids_dense_in_first_appearance_order():
    corpus = ["b x 1", "a y 2", "b z 3", "c 4"]
    d = learn_templates(corpus, 0.5)
    assert sorted(d.templates) == list(range(len(d)))
    assert d.templates[0] == ("b", VAR, VAR)


def test_unknown_lines_extend_dictionary():
    d = learn_templates(["Server a is down", "Server b is down"], 0.6)
    batch = compress(["totally new line"], d)
    assert len(d) == 2
    assert decompress(batch) == ["totally new line"]


def test_empty_corpus_rejected():
    with pytest.raises(PipelineError):
        learn_templates([])


@pytest.mark.parametrize("theta", [0, -0.1, 1.5])
def test_theta_range(theta):
    with pytest.raises(PipelineError):
        TemplateDictionary(theta=theta)


def test_variable_count_mismatch_is_corruption():
    d = TemplateDictionary(templates={0: ("Server", VAR, "is", "down")})
    bad = CompressedBatch(d, [Record(1, 0, ("a", "b"), (7, 9))])
    with pytest.raises(CorruptBatchError):
        decompress(bad)


def test_wrong_position_is_corruption():
    d = TemplateDictionary(templates={0: ("Server", VAR)})
    with pytest.raises(CorruptBatchError):
        decompress(CompressedBatch(d, [Record(1, 0, ("a",), (3,))]))


def test_empty_records_decompress_to_nothing():
    assert decompress(CompressedBatch(TemplateDictionary())) == []


@settings(max_examples=200, deadline=None)
@given(lines, st.floats(0.05, 1.0))
def test_lossless_round_trip(corpus, theta):
    d = learn_templates(corpus, theta)
    batch = compress(corpus, d)
    assert decompress(batch) == corpus
    again = deserialize_batch(serialize_batch(batch), theta)
    assert decompress(again) == corpus


@settings(max_examples=200, deadline=None)
@given(any_lines)
def test_lossless_on_arbitrary_text(corpus):
    batch = compress(corpus, learn_templates(corpus))
    assert decompress(deserialize_batch(serialize_batch(batch))) == corpus


@settings(max_examples=100, deadline=None)
@given(lines, st.floats(0.05, 1.0))
def test_fixed_tokens_match_brute_force(corpus, theta):
    d = learn_templates(corpus, theta)
    assert d.fixed_tokens() == brute_fixed(corpus, theta)


@settings(max_examples=100, deadline=None)
@given(lines, st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_fixed_set_antitone_in_theta(corpus, t1, t2):
    lo, hi = sorted((t1, t2))
    assert learn_templates(corpus, hi).fixed_tokens() <= learn_templates(corpus, lo).fixed_tokens()


@settings(max_examples=100, deadline=None)
@given(lines)
def test_record_invariants(corpus):
    batch = compress(corpus, learn_templates(corpus))
    for r in batch.records:
        pattern = batch.dictionary.templates[r.template_id]
        assert len(pattern) >= 1
        assert pattern.count(VAR) == len(r.variables) == len(r.positions)
        raw = corpus[r.line_no - 1].encode()
        for v, p in zip(r.variables, r.positions):
            assert raw[p:p + len(v.encode())] == v.encode()


@pytest.mark.parametrize("cut", [0, 3, 5, 9, -1])
def test_truncated_serialized_batch(cut):
    corpus = ["Server a is down", "Server b is down"]
    data = serialize_batch(compress(corpus, learn_templates(corpus, 0.6)))
    with pytest.raises(CorruptBatchError):
        deserialize_batch(data[:cut])


def test_serialized_batch_trailing_bytes():
    corpus = ["x y"]
    data = serialize_batch(compress(corpus, learn_templates(corpus)))
    with pytest.raises(CorruptBatchError):
        deserialize_batch(data + b"\x00")


def test_five_generator_templates_recovered():
    corpus = generate_corpus(DEFAULT_TEMPLATES, 10_000, seed=7)
    d = learn_templates(corpus)
    assert {d.template_text(t) for t in d.templates} == {t.pattern for t in DEFAULT_TEMPLATES}
    batch = compress(corpus, d)
    assert decompress(batch) == corpus
    assert compression_ratio(corpus, batch) < 0.5


def test_device_pipeline_freezes_after_window():
    p = DevicePipeline(theta=0.5, learning_window=4)
    first = p.process(["Server a is down", "Server b is down", "Server c is down", "Server d is down"])
    assert not p.learning
    frozen = dict(p.dictionary.token_frequencies)
    second = p.process(["Server e is down", "brand new text"])
    assert dict(p.dictionary.token_frequencies) == frozen
    assert [r.line_no for r in second.records] == [5, 6]
    assert decompress(first) + decompress(second) == [
        "Server a is down", "Server b is down", "Server c is down", "Server d is down",
        "Server e is down", "brand new text",
    ]
