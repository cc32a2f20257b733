"""Tasks, cloze patterns, verbalizers, and their application to inputs.

A pattern turns a (possibly multi-segment) input into a token sequence with
exactly one mask slot; a verbalizer maps each label to one vocabulary token
(or, after verbalizer search, to several).  Everything here is immutable and
pure, so it is safe to share across threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Union

from .errors import BudgetExceeded, ConfigError, DslError, PatternArityMismatch

DEFAULT_MASK_TOKEN = "<mask>"

BOUNDARY_MARKER = "||"


def tokenize(text: str) -> tuple[str, ...]:
    """Whitespace tokenization; the only tokenizer the built-in backend knows."""
    return tuple(text.split())


@dataclass(frozen=True)
class LabelSet:
    """Ordered distinct label identifiers; declaration order is canonical."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.labels:
            raise ConfigError("label set must be non-empty")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError(f"duplicate labels in {self.labels}")
        object.__setattr__(self, "labels", tuple(self.labels))

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ConfigError(f"unknown label {label!r}; known: {self.labels}") from None

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)


@dataclass(frozen=True)
class TextInput:
    """One task input: a sequence of token segments plus an optional label."""

    segments: tuple[tuple[str, ...], ...]
    label: str | None = None

    def __post_init__(self):
        if not self.segments:
            raise ConfigError("input must have at least one segment")
        object.__setattr__(self, "segments", tuple(tuple(s) for s in self.segments))

    @classmethod
    def from_texts(cls, *texts: str, label: str | None = None) -> "TextInput":
        return cls(tuple(tokenize(t) for t in texts), label=label)


# -- pattern template elements ------------------------------------------------

@dataclass(frozen=True)
class Literal:
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class SegmentRef:
    index: int


@dataclass(frozen=True)
class MaskSlot:
    pass


@dataclass(frozen=True)
class Boundary:
    pass


Element = Union[Literal, SegmentRef, MaskSlot, Boundary]


@dataclass(frozen=True)
class Pattern:
    """Cloze template: literal runs, segment placeholders, one mask slot, and
    optional segment-boundary markers (recorded, not rendered; backends map
    them to their own separators)."""

    elements: tuple[Element, ...]

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        masks = sum(isinstance(e, MaskSlot) for e in self.elements)
        if masks != 1:
            raise ConfigError(f"pattern must contain exactly one mask slot, found {masks}")

    @property
    def segment_indices(self) -> tuple[int, ...]:
        """Referenced segment indices, in order of occurrence (duplicates kept)."""
        return tuple(e.index for e in self.elements if isinstance(e, SegmentRef))

    @property
    def overhead(self) -> int:
        """Token budget the template itself consumes: literals + mask + one
        reserved slot per boundary marker."""
        n = 1  # the mask
        for e in self.elements:
            if isinstance(e, Literal):
                n += len(e.tokens)
            elif isinstance(e, Boundary):
                n += 1
        return n


@dataclass(frozen=True)
class MaskedSequence:
    """Rendered cloze question: tokens with exactly one mask, plus per-token
    segment region ids for backends that distinguish segments."""

    tokens: tuple[str, ...]
    mask_position: int
    segment_ids: tuple[int, ...]
    mask_token: str = DEFAULT_MASK_TOKEN

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "segment_ids", tuple(self.segment_ids))
        if len(self.tokens) != len(self.segment_ids):
            raise ConfigError("segment_ids must align with tokens")
        if not (0 <= self.mask_position < len(self.tokens)):
            raise ConfigError("mask_position out of range")
        if self.tokens[self.mask_position] != self.mask_token:
            raise ConfigError("token at mask_position is not the mask token")
        if self.tokens.count(self.mask_token) != 1:
            raise ConfigError("mask token must occur exactly once")


@dataclass(frozen=True)
class Verbalizer:
    """Injective label -> single-token map."""

    mapping: dict[str, str]

    def __post_init__(self):
        object.__setattr__(self, "mapping", dict(self.mapping))
        images = list(self.mapping.values())
        if len(set(images)) != len(images):
            raise ConfigError(f"verbalizer is not injective: {self.mapping}")
        for label, token in self.mapping.items():
            if not token or len(tokenize(token)) != 1:
                raise ConfigError(f"verbalization for {label!r} must be a single token, got {token!r}")
            if token == DEFAULT_MASK_TOKEN:
                raise ConfigError("the mask token cannot be a verbalization")

    def tokens_for(self, label: str) -> tuple[str, ...]:
        return (self.mapping[label],)

    def all_tokens(self) -> tuple[str, ...]:
        return tuple(self.mapping.values())

    def labels(self) -> tuple[str, ...]:
        return tuple(self.mapping.keys())


@dataclass(frozen=True)
class MultiVerbalizer:
    """Label -> several tokens; a label's score is the mean over its tokens.
    Produced by verbalizer search, consumed by the same scoring pipeline."""

    mapping: dict[str, tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(
            self, "mapping", {l: tuple(ts) for l, ts in self.mapping.items()}
        )
        for label, toks in self.mapping.items():
            if not toks:
                raise ConfigError(f"no verbalizations for label {label!r}")
            if len(set(toks)) != len(toks):
                raise ConfigError(f"duplicate verbalizations for label {label!r}: {toks}")
            for token in toks:
                if not token or len(tokenize(token)) != 1 or token == DEFAULT_MASK_TOKEN:
                    raise ConfigError(f"bad verbalization {token!r} for label {label!r}")

    def tokens_for(self, label: str) -> tuple[str, ...]:
        return self.mapping[label]

    def all_tokens(self) -> tuple[str, ...]:
        return tuple(t for ts in self.mapping.values() for t in ts)

    def labels(self) -> tuple[str, ...]:
        return tuple(self.mapping.keys())


AnyVerbalizer = Union[Verbalizer, MultiVerbalizer]


@dataclass(frozen=True)
class Pvp:
    """A pattern paired with a verbalizer over the same label set."""

    pattern: Pattern
    verbalizer: AnyVerbalizer
    label_set: LabelSet
    id: str

    def __post_init__(self):
        missing = [l for l in self.label_set if l not in self.verbalizer.mapping]
        extra = [l for l in self.verbalizer.labels() if l not in self.label_set.labels]
        if missing or extra:
            raise ConfigError(
                f"verbalizer labels do not match label set (missing={missing}, extra={extra})"
            )

    def candidate_groups(self) -> tuple[tuple[str, ...], ...]:
        """Per-label verbalization groups in canonical label order."""
        return tuple(self.verbalizer.tokens_for(l) for l in self.label_set)


# -- pattern application --------------------------------------------------------


def apply_pattern(
    pattern: Pattern,
    text_input: TextInput,
    max_seq_length: int,
    mask_token: str = DEFAULT_MASK_TOKEN,
) -> MaskedSequence:
    """Render ``P(x)``: substitute segments and the mask into the template,
    truncating segments longest-first so the result fits ``max_seq_length``.

    Truncation is defined operationally: repeatedly drop the final token of
    the currently longest referenced segment (ties: lowest segment index)
    until literals + mask + reserved boundary slots + segment tokens fit the
    budget.  Literal tokens are never truncated.
    """
    refs = pattern.segment_indices
    for idx in refs:
        if idx >= len(text_input.segments):
            raise PatternArityMismatch(
                f"pattern references segment {idx} but input has {len(text_input.segments)} segment(s)"
            )
    overhead = pattern.overhead
    if overhead > max_seq_length:
        raise BudgetExceeded(
            f"pattern overhead {overhead} exceeds max_seq_length {max_seq_length}"
        )

    # Per-segment kept lengths; a segment referenced twice is rendered twice,
    # so dropping one of its tokens frees one slot per occurrence.
    occurrences: dict[int, int] = {}
    for idx in refs:
        occurrences[idx] = occurrences.get(idx, 0) + 1
    kept = {idx: len(text_input.segments[idx]) for idx in occurrences}
    budget = max_seq_length - overhead
    total = sum(kept[i] * occurrences[i] for i in kept)
    while total > budget:
        longest = max(kept, key=lambda i: (kept[i], -i))
        if kept[longest] == 0:
            break  # unreachable: total would be 0
        kept[longest] -= 1
        total -= occurrences[longest]

    tokens: list[str] = []
    segment_ids: list[int] = []
    mask_position = -1
    region = 0
    for element in pattern.elements:
        if isinstance(element, Boundary):
            region += 1
            continue
        if isinstance(element, Literal):
            new = list(element.tokens)
        elif isinstance(element, SegmentRef):
            new = list(text_input.segments[element.index][: kept[element.index]])
        else:  # MaskSlot
            mask_position = len(tokens)
            new = [mask_token]
        tokens.extend(new)
        segment_ids.extend([region] * len(new))

    return MaskedSequence(
        tokens=tuple(tokens),
        mask_position=mask_position,
        segment_ids=tuple(segment_ids),
        mask_token=mask_token,
    )


# -- template DSL -----------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{([^{}]*)\}")


def parse_pattern_dsl(text: str) -> Pattern:
    """Parse a template like ``"It was {mask}. {0}"``.

    ``{N}`` inserts input segment N, ``{mask}`` the single mask slot, and a
    free-standing ``||`` marks a segment boundary.  Raises :class:`DslError`
    with a character position for unknown placeholders and for zero or
    multiple masks.
    """
    elements: list[Element] = []
    mask_positions: list[int] = []

    def push_literal(chunk: str, offset: int) -> None:
        for brace in "{}":
            if brace in chunk:
                raise DslError("stray brace in template", position=offset + chunk.index(brace))
        run: list[str] = []
        for tok in chunk.split():
            if tok == BOUNDARY_MARKER:
                if run:
                    elements.append(Literal(tuple(run)))
                    run = []
                elements.append(Boundary())
            else:
                run.append(tok)
        if run:
            elements.append(Literal(tuple(run)))

    pos = 0
    for match in _PLACEHOLDER.finditer(text):
        push_literal(text[pos : match.start()], pos)
        name = match.group(1)
        if name == "mask":
            mask_positions.append(match.start())
            elements.append(MaskSlot())
        elif name.isdigit():
            elements.append(SegmentRef(int(name)))
        else:
            raise DslError(f"unknown placeholder {{{name}}}", position=match.start())
        pos = match.end()
    push_literal(text[pos:], pos)

    if len(mask_positions) == 0:
        raise DslError("template has no {mask} slot", position=0)
    if len(mask_positions) > 1:
        raise DslError("template has more than one {mask} slot", position=mask_positions[1])

    # canonical form: merge adjacent literal runs
    merged: list[Element] = []
    for element in elements:
        if merged and isinstance(element, Literal) and isinstance(merged[-1], Literal):
            merged[-1] = Literal(merged[-1].tokens + element.tokens)
        else:
            merged.append(element)
    return Pattern(tuple(merged))


def serialize_pattern(pattern: Pattern) -> str:
    """Inverse of :func:`parse_pattern_dsl` up to whitespace normalization:
    ``parse_pattern_dsl(serialize_pattern(p)) == p``."""
    parts: list[str] = []
    for element in pattern.elements:
        if isinstance(element, Literal):
            parts.extend(element.tokens)
        elif isinstance(element, SegmentRef):
            parts.append(f"{{{element.index}}}")
        elif isinstance(element, MaskSlot):
            parts.append("{mask}")
        else:
            parts.append(BOUNDARY_MARKER)
    return " ".join(parts)


def build_pvps(
    label_set: LabelSet,
    patterns: list[Pattern],
    verbalizers: list[AnyVerbalizer],
    id_prefix: str = "",
) -> tuple[Pvp, ...]:
    """Cross product of patterns and verbalizers, with stable ids ``pP-vV``."""
    pvps = []
    for pi, pattern in enumerate(patterns):
        for vi, verbalizer in enumerate(verbalizers):
            pvp_id = f"{id_prefix}p{pi}-v{vi}" if len(verbalizers) > 1 else f"{id_prefix}p{pi}"
            pvps.append(Pvp(pattern=pattern, verbalizer=verbalizer, label_set=label_set, id=pvp_id))
    return tuple(pvps)
