import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxguide.prompt_parser import (
    AlignmentError,
    EntityLexicon,
    EntitySpan,
    ParseError,
    WordTokenizer,
    filter_spans,
    format_spans,
    parse_entities,
    span_from_phrase,
    token_indices,
)

FILTER_EXAMPLES = [
    ("a white clock tower with a clock on each of it 's sides",
     ["a white clock tower", "a clock", "it 's"], ["a white clock tower", "a clock"]),
    ("a man is sitting on the back of an elephant",
     ["a man", "the back", "an elephant"], ["a man", "an elephant"]),
    ("many different fruits are next to each other",
     ["many different fruits", "each other"], ["many different fruits"]),
    ("a large red umbrella with other colors around the center pole",
     ["a large red umbrella", "other colors", "the center pole"], ["a large red umbrella"]),
]


class WhitespaceTokenizer:
    name = "whitespace"

    def offsets(self, text):
        return [(m.start(), m.end()) for m in re.finditer(r"\S+", text)]


class NoAlignmentTokenizer:
    name = "opaque"


def test_two_entity_prompt():
    parsed = parse_entities("a black cat and a yellow dog")
    assert parsed.phrases() == ["a black cat", "a yellow dog"]
    assert parsed.head_nouns() == ["cat", "dog"]
    assert [s.attribute for s in parsed.spans] == ["black", "yellow"]
    assert [s.token_indices for s in parsed.spans] == [(0, 1, 2), (4, 5, 6)]


def test_multiword_noun():
    parsed = parse_entities("a red teddy bear is sitting next to a black bird")
    assert parsed.phrases() == ["a red teddy bear", "a black bird"]
    assert parsed.head_nouns() == ["teddy bear", "bird"]


def test_empty_prompt_rejected():
    with pytest.raises(ParseError):
        parse_entities("")
    with pytest.raises(ParseError):
        parse_entities("   ")


def test_no_lexicon_noun_gives_no_spans():
    lex = EntityLexicon([("animal", "cat"), ("animal", "dog"), ("determiner", "a")])
    assert parse_entities("sunset over mountains", lex).n_entities == 0


def test_capacity_enforced():
    prompt = " and ".join(["a cat"] * 5)
    assert parse_entities(prompt, max_entities=5).n_entities == 5
    with pytest.raises(ParseError):
        parse_entities(prompt, max_entities=4)


def test_color_word_that_is_also_a_noun():
    assert parse_entities("an orange and a blue square").phrases() == ["an orange", "a blue square"]
    assert parse_entities("an orange cat").phrases() == ["an orange cat"]


def test_plural_head_resolves_to_lemma():
    parsed = parse_entities("many different fruits are next to each other")
    assert parsed.spans[0].head_noun == "fruit"
    assert parsed.spans[0].attribute == "different"


@pytest.mark.parametrize("prompt,candidates,expected", FILTER_EXAMPLES)
def test_filter_examples(prompt, candidates, expected):
    start, spans = 0, []
    for phrase in candidates:
        span = span_from_phrase(prompt, phrase, start=start)
        start = span.char_range[1]
        spans.append(span)
    assert [s.phrase for s in filter_spans(spans)] == expected


@pytest.mark.parametrize("prompt,candidates,expected", FILTER_EXAMPLES)
def test_parser_output_already_filtered(prompt, candidates, expected):
    assert parse_entities(prompt).phrases() == expected


def test_filter_empty():
    assert filter_spans([]) == []


def test_token_indices_whitespace_tokenizer():
    prompt = "a black cat and a yellow dog"
    span = EntitySpan("a black cat", "cat", "black", (0, 11))
    assert token_indices(prompt, span, WhitespaceTokenizer()) == (0, 1, 2)
    last = EntitySpan("dog", "dog", None, (25, 28))
    assert token_indices(prompt, last, WhitespaceTokenizer()) == (6,)


def test_token_indices_errors():
    prompt = "a black cat and a yellow dog"
    with pytest.raises(AlignmentError):
        token_indices(prompt, EntitySpan("a zebra", "zebra", None, (0, 7)), WhitespaceTokenizer())
    with pytest.raises(AlignmentError):
        token_indices(prompt, EntitySpan("a black cat", "cat", "black", (0, 11)), NoAlignmentTokenizer())
    with pytest.raises(AlignmentError):
        span_from_phrase(prompt, "a zebra")


def test_lexicon_file_roundtrip(tmp_path):
    path = tmp_path / "lex.tsv"
    path.write_text("# comment\nanimal\tcat\ndeterminer\ta\ncolor\tred\n", encoding="utf-8")
    lex = EntityLexicon.from_file(path)
    assert parse_entities("a red cat", lex).phrases() == ["a red cat"]


def test_lexicon_rejects_unknown_category():
    with pytest.raises(ValueError):
        EntityLexicon([("vehicle", "car")])


def test_category_ids_distinguish_nouns():
    lex = EntityLexicon.default()
    assert lex.category_id("square") != lex.category_id("circle")
    assert lex.category_id("cats") == lex.category_id("cat")


def test_format_spans():
    out = format_spans(parse_entities("a black cat and a yellow dog"))
    assert out.splitlines() == ["0:11\ta black cat\tcat\t0,1,2", "16:28\ta yellow dog\tdog\t4,5,6"]


_WORDS = ["a", "the", "red", "blue", "big", "cat", "dog", "square", "and", "with", "on", "teddy", "bear", "sky"]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(_WORDS), min_size=1, max_size=14))
def test_spans_are_ordered_disjoint_and_aligned(words):
    prompt = " ".join(words)
    parsed = parse_entities(prompt)
    tok = WordTokenizer()
    prev_end = -1
    for s in parsed.spans:
        a, b = s.char_range
        assert prompt[a:b] == s.phrase
        assert a > prev_end
        prev_end = b
        assert s.token_indices == token_indices(prompt, s, tok)
        assert s.phrase.lower().endswith(s.head_noun.split()[-1]) or s.head_noun in s.phrase.lower()
