import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipmem.errors import ConfigError, ShapeError
from clipmem.layout import LayoutSpec, TokenKind, TokenLayout


def test_small_layout_index_sets():
    lay = TokenLayout(LayoutSpec(2, 2, 1, 1))
    assert lay.total_len == 7
    assert list(lay.visual_indices(1)) == [0, 1]
    assert list(lay.visual_indices(2)) == [2, 3]
    assert list(lay.text_indices) == [4]
    assert list(lay.context_indices(1)) == [5]
    assert list(lay.context_indices(2)) == [6]


def test_minimal_layout_labels():
    lay = TokenLayout(LayoutSpec(1, 1, 1, 1))
    assert lay.total_len == 3
    kinds = [lay.kind_of(i) for i in range(3)]
    assert kinds == [TokenKind.VISUAL, TokenKind.TEXT, TokenKind.CONTEXT]


def test_production_shape_total_length():
    # 64 frames, 4 patches, 16 context slots, 8 text tokens.
    assert LayoutSpec(64, 4, 16, 8).total_len == 64 * 20 + 8 == 1288


def test_frame_of():
    lay = TokenLayout(LayoutSpec(2, 2, 1, 1))
    assert lay.frame_of(3) == 2 and lay.kind_of(3) is TokenKind.VISUAL
    assert lay.frame_of(4) is None and lay.kind_of(4) is TokenKind.TEXT
    assert lay.frame_of(6) == 2 and lay.kind_of(6) is TokenKind.CONTEXT


def test_out_of_range_index():
    lay = TokenLayout(LayoutSpec(2, 2, 1, 1))
    with pytest.raises(ShapeError):
        lay.frame_of(7)
    with pytest.raises(ShapeError):
        lay.kind_of(-1)
    with pytest.raises(ShapeError):
        lay.visual_indices(3)


@pytest.mark.parametrize("bad", [(0, 1, 1, 1), (1, 0, 1, 1), (1, 1, 0, 1), (1, 1, 1, -1)])
def test_invalid_spec(bad):
    with pytest.raises(ConfigError):
        LayoutSpec(*bad)


def test_text_len_zero_allowed_for_unit_tests():
    lay = TokenLayout(LayoutSpec(2, 1, 1, 0))
    assert list(lay.text_indices) == []
    assert lay.total_len == 4


@settings(max_examples=80, deadline=None)
@given(
    frames=st.integers(1, 8),
    patches=st.integers(1, 6),
    context=st.integers(1, 4),
    text=st.integers(0, 5),
)
def test_index_sets_partition_positions(frames, patches, context, text):
    lay = TokenLayout(LayoutSpec(frames, patches, context, text))
    groups = [list(lay.visual_indices(k)) for k in range(1, frames + 1)]
    groups.append(list(lay.text_indices))
    groups += [list(lay.context_indices(k)) for k in range(1, frames + 1)]
    flat = [i for g in groups for i in g]
    assert sorted(flat) == list(range(lay.total_len))
    assert all(g == sorted(g) for g in groups)
    # visual of frame k precedes frame k+1; context follows all text
    for k in range(1, frames):
        assert lay.visual_indices(k)[-1] < lay.visual_indices(k + 1)[0]
        assert lay.context_indices(k)[-1] < lay.context_indices(k + 1)[0]
    if text:
        assert lay.text_indices[-1] < lay.context_indices(1)[0]
    # labels round-trip through frame_of/kind_of
    for k in range(1, frames + 1):
        assert all(lay.frame_of(i) == k for i in lay.visual_indices(k))
        assert all(lay.frame_of(i) == k for i in lay.context_indices(k))
    assert all(lay.frame_of(i) is None for i in lay.text_indices)
