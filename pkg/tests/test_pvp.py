import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petkit.errors import BudgetExceeded, ConfigError, DslError, PatternArityMismatch
from petkit.pvp import (
    Boundary,
    Literal,
    MaskSlot,
    Pattern,
    SegmentRef,
    TextInput,
    Verbalizer,
    apply_pattern,
    parse_pattern_dsl,
    serialize_pattern,
)

MASK = "<mask>"


def test_parse_yelp_style_pattern():
    p = parse_pattern_dsl("It was {mask}. {0}")
    assert p.elements == (
        Literal(("It", "was")),
        MaskSlot(),
        Literal((".",)),
        SegmentRef(0),
    )


def test_apply_yelp_style_pattern():
    p = parse_pattern_dsl("It was {mask}. {0}")
    x = TextInput.from_texts("Best pizza ever!")
    seq = apply_pattern(p, x, max_seq_length=256)
    assert seq.tokens == ("It", "was", MASK, ".", "Best", "pizza", "ever!")
    assert seq.mask_position == 2
    assert seq.segment_ids == (0,) * 7


def test_mask_only_pattern_ignores_input():
    p = parse_pattern_dsl("{mask}")
    seq = apply_pattern(p, TextInput.from_texts("anything at all"), 16)
    assert seq.tokens == (MASK,)
    assert seq.mask_position == 0


def test_boundary_marker_records_regions_and_budget():
    p = parse_pattern_dsl("{0} || In summary, the restaurant is {mask}.")
    assert Boundary() in p.elements
    x = TextInput.from_texts("good gnocchi")
    seq = apply_pattern(p, x, 64)
    # tokens before the boundary are region 0, after it region 1
    assert seq.segment_ids[:2] == (0, 0)
    assert set(seq.segment_ids[2:]) == {1}
    # boundary reserves one budget slot: overhead counts it
    assert p.overhead == len("In summary, the restaurant is .".split()) + 1 + 1


def test_dsl_errors_carry_positions():
    with pytest.raises(DslError):
        parse_pattern_dsl("no mask here {0}")
    with pytest.raises(DslError) as err:
        parse_pattern_dsl("{mask} and {mask}")
    assert err.value.position == len("{mask} and ")
    with pytest.raises(DslError):
        parse_pattern_dsl("{mask} {banana}")
    with pytest.raises(DslError):
        parse_pattern_dsl("{mask} stray { brace")


def test_arity_and_budget_errors():
    p = parse_pattern_dsl("{0} {1} {mask}")
    with pytest.raises(PatternArityMismatch):
        apply_pattern(p, TextInput.from_texts("only one segment"), 32)
    wide = parse_pattern_dsl("a b c d e f g h {mask}")
    with pytest.raises(BudgetExceeded):
        apply_pattern(wide, TextInput.from_texts("x"), 5)


def reference_truncation(pattern: Pattern, x: TextInput, max_len: int):
    """Brute-force oracle: drop one token at a time from the currently
    longest referenced segment until the rendered sequence fits."""
    refs = list(pattern.segment_indices)
    occ = {i: refs.count(i) for i in set(refs)}
    kept = {i: len(x.segments[i]) for i in occ}

    def total():
        return pattern.overhead + sum(kept[i] * occ[i] for i in kept)

    while total() > max_len and any(kept.values()):
        longest = None
        for i in sorted(kept):
            if longest is None or kept[i] > kept[longest]:
                longest = i
        kept[longest] -= 1

    tokens = []
    for el in pattern.elements:
        if isinstance(el, Literal):
            tokens.extend(el.tokens)
        elif isinstance(el, SegmentRef):
            tokens.extend(x.segments[el.index][: kept[el.index]])
        elif isinstance(el, MaskSlot):
            tokens.append(MASK)
    return tuple(tokens)


def test_longest_first_truncation_matches_spec_example():
    # two 200-token segments, overhead 6 (4 literals + mask + boundary), max 256
    p = Pattern(
        (
            Literal(("a", "b", "c", "d")),
            SegmentRef(0),
            Boundary(),
            SegmentRef(1),
            MaskSlot(),
        )
    )
    assert p.overhead == 6
    x = TextInput((tuple(f"s{i}" for i in range(200)), tuple(f"t{i}" for i in range(200))))
    seq = apply_pattern(p, x, 256)
    boundaries = max(seq.segment_ids)
    assert len(seq.tokens) + boundaries == 256
    kept0 = sum(t.startswith("s") for t in seq.tokens)
    kept1 = sum(t.startswith("t") for t in seq.tokens)
    assert (kept0, kept1) == (125, 125)
    assert seq.tokens == reference_truncation(p, x, 256)


@st.composite
def pattern_and_input(draw):
    arity = draw(st.integers(1, 3))
    elements = [MaskSlot()]
    for idx in range(arity):
        elements.append(SegmentRef(idx))
    n_lit = draw(st.integers(0, 3))
    for _ in range(n_lit):
        run = draw(st.lists(st.sampled_from(["lit1", "lit2", "x", "."]), min_size=1, max_size=3))
        elements.append(Literal(tuple(run)))
    if draw(st.booleans()):
        elements.append(Boundary())
    order = draw(st.permutations(elements))
    segments = tuple(
        tuple(f"s{idx}_{i}" for i in range(draw(st.integers(0, 30)) + 1))
        for idx in range(arity)
    )
    max_len = draw(st.integers(0, 40))
    return Pattern(tuple(order)), TextInput(segments), max_len


@settings(max_examples=200, deadline=None)
@given(pattern_and_input())
def test_truncation_matches_bruteforce_oracle(case):
    pattern, x, extra = case
    max_len = pattern.overhead + extra
    seq = apply_pattern(pattern, x, max_len)
    assert seq.tokens == reference_truncation(pattern, x, max_len)
    assert seq.tokens.count(MASK) == 1
    boundaries = sum(1 for el in pattern.elements if isinstance(el, Boundary))
    assert len(seq.tokens) + boundaries <= max_len


@settings(max_examples=200, deadline=None)
@given(pattern_and_input())
def test_truncation_idempotent_when_fitting(case):
    pattern, x, _ = case
    need = pattern.overhead + sum(
        len(x.segments[i]) for i in pattern.segment_indices
    )
    seq = apply_pattern(pattern, x, need)
    # every segment token survives
    for idx in set(pattern.segment_indices):
        for tok in x.segments[idx]:
            assert tok in seq.tokens


DSL_EXAMPLES = [
    "It was {mask}. {0}",
    "{mask}",
    "{0} || In summary, the restaurant is {mask}.",
    "{mask} : {0} {1}",
    "[ Category: {mask} ] {0} {1}",
    '"{0}" ? || {mask}, "{1}"',
]


@pytest.mark.parametrize("text", DSL_EXAMPLES)
def test_dsl_roundtrip(text):
    pattern = parse_pattern_dsl(text)
    assert parse_pattern_dsl(serialize_pattern(pattern)) == pattern


def test_verbalizer_validation():
    with pytest.raises(ConfigError):
        Verbalizer({"a": "same", "b": "same"})  # not injective
    with pytest.raises(ConfigError):
        Verbalizer({"a": "two words"})  # multi-token image
    with pytest.raises(ConfigError):
        Verbalizer({"a": MASK})
    v = Verbalizer({"pos": "great", "neg": "bad"})
    assert v.tokens_for("pos") == ("great",)
