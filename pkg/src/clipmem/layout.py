"""Token layout of the encoder input sequence.

A window of ``frames`` frames enters the encoder as one flat sequence:
all visual patch tokens frame-major, then the question text tokens, then
the per-frame context slots frame-major.  Frames are numbered 1-based.

The layout owns the three index families every mask builder consumes:
visual indices of frame k, text indices, context indices of frame k.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError

__all__ = ["TokenKind", "LayoutSpec", "TokenLayout"]


class TokenKind(Enum):
    VISUAL = "visual"
    TEXT = "text"
    CONTEXT = "context"


@dataclass(frozen=True)
class LayoutSpec:
    """Geometry of one encoder window.

    ``text_len == 0`` is tolerated for mask-level unit tests; the
    streaming pipeline requires at least one text token.
    """

    frames: int
    patches_per_frame: int
    context_per_frame: int
    text_len: int

    def __post_init__(self) -> None:
        if self.frames < 1 or self.patches_per_frame < 1 or self.context_per_frame < 1:
            raise ConfigError(
                "frames, patches_per_frame and context_per_frame must all be >= 1, "
                f"got {self}"
            )
        if self.text_len < 0:
            raise ConfigError(f"text_len must be >= 0, got {self.text_len}")

    @property
    def total_len(self) -> int:
        return self.frames * (self.patches_per_frame + self.context_per_frame) + self.text_len


class TokenLayout:
    """Index arithmetic over the fixed token ordering."""

    def __init__(self, spec: LayoutSpec):
        self.spec = spec
        self.total_len = spec.total_len
        self._visual_end = spec.frames * spec.patches_per_frame
        self._text_end = self._visual_end + spec.text_len

    @property
    def frames(self) -> int:
        return self.spec.frames

    def visual_indices(self, frame: int) -> range:
        """Positions of frame ``frame``'s patch tokens (1-based frame id)."""
        self._check_frame(frame)
        p = self.spec.patches_per_frame
        return range((frame - 1) * p, frame * p)

    @property
    def text_indices(self) -> range:
        return range(self._visual_end, self._text_end)

    def context_indices(self, frame: int) -> range:
        self._check_frame(frame)
        c = self.spec.context_per_frame
        start = self._text_end + (frame - 1) * c
        return range(start, start + c)

    def kind_of(self, index: int) -> TokenKind:
        self._check_index(index)
        if index < self._visual_end:
            return TokenKind.VISUAL
        if index < self._text_end:
            return TokenKind.TEXT
        return TokenKind.CONTEXT

    def frame_of(self, index: int) -> int | None:
        """Frame id for visual/context positions, None for text tokens."""
        self._check_index(index)
        if index < self._visual_end:
            return index // self.spec.patches_per_frame + 1
        if index < self._text_end:
            return None
        return (index - self._text_end) // self.spec.context_per_frame + 1

    def kind_array(self) -> np.ndarray:
        """Per-position kind codes: 0 visual, 1 text, 2 context."""
        out = np.empty(self.total_len, dtype=np.int64)
        out[: self._visual_end] = 0
        out[self._visual_end : self._text_end] = 1
        out[self._text_end :] = 2
        return out

    def frame_array(self) -> np.ndarray:
        """Per-position frame ids (1-based); 0 for text tokens."""
        s = self.spec
        out = np.zeros(self.total_len, dtype=np.int64)
        visual = np.repeat(np.arange(1, s.frames + 1), s.patches_per_frame)
        context = np.repeat(np.arange(1, s.frames + 1), s.context_per_frame)
        out[: self._visual_end] = visual
        out[self._text_end :] = context
        return out

    def _check_frame(self, frame: int) -> None:
        if not 1 <= frame <= self.spec.frames:
            raise ShapeError(f"frame {frame} out of range 1..{self.spec.frames}")

    def _check_index(self, index: int) -> None:
        if not 0 <= index < self.total_len:
            raise ShapeError(f"index {index} out of range 0..{self.total_len - 1}")

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        s = self.spec
        return (
            f"TokenLayout(frames={s.frames}, patches={s.patches_per_frame}, "
            f"context={s.context_per_frame}, text={s.text_len}, total={self.total_len})"
        )
