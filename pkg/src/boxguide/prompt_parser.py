"""Rule-based entity chunking over a word lexicon.

Entities are noun phrases of the form ``[determiner]? [attribute]* noun+`` whose
nouns resolve in an :class:`EntityLexicon`. Each span is mapped to the token
indices it occupies in the denoiser's tokenization so that attention columns
can be masked per entity.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

ENTITY_CATEGORIES = ("animal", "object", "person", "shape")
MODIFIER_CATEGORIES = ("color", "attribute")
ALL_CATEGORIES = ENTITY_CATEGORIES + MODIFIER_CATEGORIES + ("determiner",)

DEFAULT_QUERY_CAPACITY = 30

_WORD_RE = re.compile(r"\w+(?:'\w+)?|'\w+|[^\w\s]")


class ParseError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class EntityLexicon:
    """Word lists keyed by category.

    A word may live in several categories ("orange" is both a color and a
    fruit); the chunker decides from context. Multi-word nouns ("teddy bear")
    are matched longest-first.
    """

    def __init__(self, entries: Iterable[tuple[str, str]]):
        self.categories: dict[str, set[str]] = {c: set() for c in ALL_CATEGORIES}
        for category, word in entries:
            category = category.strip().lower()
            word = " ".join(word.strip().lower().split())
            if category not in self.categories:
                raise ValueError(f"unknown lexicon category {category!r}")
            if word:
                self.categories[category].add(word)
        self._noun_category = {}
        for category in ENTITY_CATEGORIES:
            for word in self.categories[category]:
                self._noun_category.setdefault(word, category)
        self.nouns = sorted(self._noun_category)
        self._noun_ids = {w: i for i, w in enumerate(self.nouns)}
        self.max_noun_words = max((len(n.split()) for n in self.nouns), default=1)

    @classmethod
    def from_file(cls, path: str | Path) -> "EntityLexicon":
        text = Path(path).read_text(encoding="utf-8")
        return cls(_parse_lexicon_lines(text.splitlines()))

    @classmethod
    def default(cls) -> "EntityLexicon":
        text = resources.files("boxguide.data").joinpath("lexicon.tsv").read_text(encoding="utf-8")
        return cls(_parse_lexicon_lines(text.splitlines()))

    def extend(self, entries: Iterable[tuple[str, str]]) -> "EntityLexicon":
        return EntityLexicon(list(self.entries()) + list(entries))

    def entries(self):
        for category in ALL_CATEGORIES:
            for word in sorted(self.categories[category]):
                yield category, word

    def is_determiner(self, word: str) -> bool:
        return word.lower() in self.categories["determiner"]

    def is_modifier(self, word: str) -> bool:
        w = word.lower()
        return w in self.categories["color"] or w in self.categories["attribute"]

    def resolve_noun(self, text: str) -> str | None:
        """Canonical lexicon noun for ``text`` (plural forms folded), else None."""
        words = text.lower().split()
        if not words:
            return None
        joined = " ".join(words)
        if joined in self._noun_category:
            return joined
        head, last = words[:-1], words[-1]
        for singular in _singular_forms(last):
            cand = " ".join(head + [singular])
            if cand in self._noun_category:
                return cand
        return None

    def noun_category(self, noun: str) -> str | None:
        canonical = self.resolve_noun(noun)
        return None if canonical is None else self._noun_category[canonical]

    def category_id(self, noun: str) -> int:
        """Integer class of a head noun; used as the entity's class label in matching."""
        canonical = self.resolve_noun(noun)
        if canonical is None:
            raise KeyError(f"{noun!r} is not an entity noun in the lexicon")
        return self._noun_ids[canonical]

    def vocabulary(self) -> list[str]:
        words = set()
        for category in ALL_CATEGORIES:
            for entry in self.categories[category]:
                words.update(entry.split())
        return sorted(words)


def _parse_lexicon_lines(lines: Iterable[str]) -> list[tuple[str, str]]:
    entries = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"lexicon line {lineno}: expected 'category<TAB>word'")
        entries.append((parts[0], parts[1]))
    return entries


def _singular_forms(word: str) -> list[str]:
    out = []
    if word.endswith("ies") and len(word) > 4:
        out.append(word[:-3] + "y")
    if word.endswith("es") and len(word) > 3:
        out.append(word[:-2])
    if word.endswith("s") and not word.endswith("ss") and len(word) > 2:
        out.append(word[:-1])
    return out


class Tokenizer(Protocol):
    name: str

    def offsets(self, text: str) -> list[tuple[int, int]]:
        """Character extents of the content tokens (no special tokens)."""

    def decode_token(self, text: str, index: int) -> str:
        ...


class WordTokenizer:
    """Word/punctuation tokenizer with exact character alignment.

    This is the tokenization the toy denoiser conditions on; it has no begin or
    end tokens, so token index ``i`` is the ``i``-th word of the prompt.
    """

    name = "word-v1"

    def tokens(self, text: str) -> list[str]:
        return [m.group(0).lower() for m in _WORD_RE.finditer(text)]

    def offsets(self, text: str) -> list[tuple[int, int]]:
        return [(m.start(), m.end()) for m in _WORD_RE.finditer(text)]

    def decode_token(self, text: str, index: int) -> str:
        start, end = self.offsets(text)[index]
        return text[start:end]


@dataclass(frozen=True)
class EntitySpan:
    phrase: str
    head_noun: str
    attribute: str | None
    char_range: tuple[int, int]
    token_indices: tuple[int, ...] = field(default=())

    def with_tokens(self, indices: Sequence[int]) -> "EntitySpan":
        return EntitySpan(self.phrase, self.head_noun, self.attribute, self.char_range, tuple(indices))


@dataclass(frozen=True)
class ParsedPrompt:
    prompt: str
    spans: tuple[EntitySpan, ...]
    tokenizer_id: str

    @property
    def n_entities(self) -> int:
        return len(self.spans)

    def phrases(self) -> list[str]:
        return [s.phrase for s in self.spans]

    def head_nouns(self) -> list[str]:
        return [s.head_noun for s in self.spans]


def token_indices(prompt: str, span: EntitySpan, tokenizer: Tokenizer) -> tuple[int, ...]:
    """Indices of every token whose character extent intersects the span."""
    offsets_fn = getattr(tokenizer, "offsets", None)
    if offsets_fn is None:
        raise AlignmentError(f"tokenizer {type(tokenizer).__name__} provides no character alignment")
    start, end = span.char_range
    if not (0 <= start < end <= len(prompt)) or prompt[start:end] != span.phrase:
        raise AlignmentError(f"span {span.phrase!r} does not align with the prompt at {span.char_range}")
    hits = tuple(i for i, (a, b) in enumerate(offsets_fn(prompt)) if a < end and b > start)
    if not hits:
        raise AlignmentError(f"no token covers span {span.phrase!r}")
    return hits


def _match_noun_run(words: list[str], i: int, lexicon: EntityLexicon) -> tuple[int, str | None]:
    """Consume a maximal run of lexicon nouns starting at ``i``.

    Returns the end index and the canonical head (last noun), or (i, None).
    """
    j, head = i, None
    while j < len(words):
        best = 0
        for k in range(min(lexicon.max_noun_words, len(words) - j), 0, -1):
            canonical = lexicon.resolve_noun(" ".join(words[j:j + k]))
            if canonical is not None:
                best, head_here = k, canonical
                break
        if not best:
            break
        j += best
        head = head_here
    return j, head


def _longest_span_at(words: list[str], i: int, lexicon: EntityLexicon):
    j = i
    if j < len(words) and lexicon.is_determiner(words[j]):
        j += 1
    attr_start = j
    while j < len(words) and lexicon.is_modifier(words[j]):
        j += 1
    # back off modifiers that double as nouns ("an orange") when no noun follows
    while True:
        end, head = _match_noun_run(words, j, lexicon)
        if head is not None:
            return end, head, words[attr_start:j]
        if j == attr_start:
            return None
        j -= 1


def parse_entities(prompt: str, lexicon: EntityLexicon | None = None,
                   tokenizer: Tokenizer | None = None,
                   max_entities: int = DEFAULT_QUERY_CAPACITY) -> ParsedPrompt:
    if not prompt or not prompt.strip():
        raise ParseError("prompt must be nonempty")
    lexicon = lexicon or EntityLexicon.default()
    tokenizer = tokenizer or WordTokenizer()
    matches = list(_WORD_RE.finditer(prompt))
    words = [m.group(0).lower() for m in matches]

    candidates = []
    for i in range(len(words)):
        found = _longest_span_at(words, i, lexicon)
        if found is not None:
            end, head, attrs = found
            candidates.append((i, end, head, attrs))
    # longer spans first, then earlier
    candidates.sort(key=lambda c: (-(c[1] - c[0]), c[0]))
    taken = [False] * len(words)
    chosen = []
    for start, end, head, attrs in candidates:
        if any(taken[start:end]):
            continue
        for k in range(start, end):
            taken[k] = True
        chosen.append((start, end, head, attrs))
    chosen.sort()

    spans = []
    for start, end, head, attrs in chosen:
        a, b = matches[start].start(), matches[end - 1].end()
        span = EntitySpan(prompt[a:b], head, " ".join(attrs) or None, (a, b))
        spans.append(span.with_tokens(token_indices(prompt, span, tokenizer)))
    if len(spans) > max_entities:
        raise ParseError(f"prompt has {len(spans)} entities, capacity is {max_entities}")
    return ParsedPrompt(prompt, tuple(spans), tokenizer.name)


def span_from_phrase(prompt: str, phrase: str, lexicon: EntityLexicon | None = None,
                     tokenizer: Tokenizer | None = None, start: int = 0) -> EntitySpan:
    """Wrap an externally produced phrase (e.g. from another parser) as a span.

    The head noun is the longest lexicon-noun suffix of the phrase, falling back
    to its last word when nothing resolves.
    """
    lexicon = lexicon or EntityLexicon.default()
    tokenizer = tokenizer or WordTokenizer()
    a = prompt.find(phrase, start)
    if a < 0:
        raise AlignmentError(f"{phrase!r} not found in prompt")
    words = [m.group(0).lower() for m in _WORD_RE.finditer(phrase)]
    head, n_head = words[-1], 1
    for k in range(min(len(words), lexicon.max_noun_words), 0, -1):
        canonical = lexicon.resolve_noun(" ".join(words[-k:]))
        if canonical is not None:
            head, n_head = canonical, k
            break
    body = words[:-n_head]
    if body and lexicon.is_determiner(body[0]):
        body = body[1:]
    span = EntitySpan(phrase, head, " ".join(body) or None, (a, a + len(phrase)))
    return span.with_tokens(token_indices(prompt, span, tokenizer))


def filter_spans(spans: Sequence[EntitySpan], lexicon: EntityLexicon | None = None) -> list[EntitySpan]:
    """Drop spans whose head noun is not an entity in the lexicon."""
    lexicon = lexicon or EntityLexicon.default()
    return [s for s in spans if lexicon.resolve_noun(s.head_noun) is not None]


def format_spans(parsed: ParsedPrompt) -> str:
    lines = []
    for s in parsed.spans:
        idx = ",".join(str(i) for i in s.token_indices)
        lines.append(f"{s.char_range[0]}:{s.char_range[1]}\t{s.phrase}\t{s.head_noun}\t{idx}")
    return "\n".join(lines)
