"""Clip-wise streaming loop with memory feedback.

A video of T frames is cut into consecutive clips of ``clip_frames``.
For each clip the loop recalls up to ``recall_frames`` past frames from
the context memory, embeds current-then-recalled frames, encodes the
window, scores per-frame relevance from the attention traces, updates the
recalled frames' memory slots when feedback re-measurement is enabled,
and appends the current frames.  Work per clip is bounded by the window
geometry, never by T, so a full pass is linear in the video length.

Recalled frames are re-embedded each clip; embedders are required to be
deterministic per frame id, so this costs a constant factor and no cache
is kept.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .compressor import (
    CompressorConfig,
    CompressorWeights,
    assemble_input,
    compute_relevance,
    encode,
    init_weights,
)
from .errors import ConfigError, ShapeError
from .formats import read_qvem, read_qvtq
from .memory import ContextMemory, MemoryEntry

__all__ = [
    "StreamConfig",
    "Embedder",
    "FileEmbedder",
    "ClipTrace",
    "StreamResult",
    "plan_clips",
    "run_stream",
    "assemble_decoder_input",
    "write_trace_csv",
    "write_mutation_csv",
]


@dataclass(frozen=True)
class StreamConfig:
    clip_frames: int = 32
    recall_frames: int = 32
    capacity: int = 256
    min_frames: int = 64          # 0 disables the floor
    update_recalled: bool = False
    compressor: CompressorConfig = field(default_factory=CompressorConfig)

    def __post_init__(self) -> None:
        if self.clip_frames < 1:
            raise ConfigError(f"clip_frames must be >= 1, got {self.clip_frames}")
        if self.recall_frames < 0:
            raise ConfigError(f"recall_frames must be >= 0, got {self.recall_frames}")
        if self.capacity < self.clip_frames:
            raise ConfigError(
                f"capacity {self.capacity} must be >= clip_frames {self.clip_frames}"
            )
        if self.min_frames < 0:
            raise ConfigError(f"min_frames must be >= 0, got {self.min_frames}")

    @property
    def window_frames(self) -> int:
        return self.clip_frames + self.recall_frames


class Embedder(Protocol):
    """Per-frame embedding source; must be deterministic per frame id."""

    total_frames: int
    patches: int
    model_dim: int
    text_len: int

    def frames(self, frame_ids: Sequence[int]) -> np.ndarray:
        """Embeddings for the given 1-based frame ids: (len, patches, dim)."""
        ...

    def question(self) -> np.ndarray:
        """Question embedding rows: (text_len, dim)."""
        ...


class FileEmbedder:
    """Serves embeddings loaded from a QVEM file plus a QVTQ question."""

    def __init__(self, qvem_path, qvtq_path):
        self._frames = read_qvem(qvem_path)
        self._question = read_qvtq(qvtq_path)
        if self._question.shape[1] != self._frames.shape[2]:
            raise ShapeError(
                f"question dim {self._question.shape[1]} != frame dim {self._frames.shape[2]}"
            )
        self.total_frames = self._frames.shape[0]
        self.patches = self._frames.shape[1]
        self.model_dim = self._frames.shape[2]
        self.text_len = self._question.shape[0]

    def frames(self, frame_ids: Sequence[int]) -> np.ndarray:
        ids = np.asarray(list(frame_ids), dtype=np.int64)
        if ids.size and (ids.min() < 1 or ids.max() > self.total_frames):
            raise ShapeError(f"frame ids out of range 1..{self.total_frames}")
        return self._frames[ids - 1]

    def question(self) -> np.ndarray:
        return self._question


def plan_clips(total_frames: int, clip_frames: int) -> list[range]:
    """Consecutive non-overlapping 1-based frame-id ranges covering the video."""
    if total_frames < 1:
        raise ConfigError(f"total_frames must be >= 1, got {total_frames}")
    if clip_frames < 1:
        raise ConfigError(f"clip_frames must be >= 1, got {clip_frames}")
    return [
        range(start, min(start + clip_frames, total_frames + 1))
        for start in range(1, total_frames + 1, clip_frames)
    ]


@dataclass
class ClipTrace:
    clip_index: int                     # 1-based
    current_ids: tuple[int, ...]
    recalled_ids: tuple[int, ...]
    relevance: tuple[float, ...]        # one score per window frame, current first
    mutations: tuple[tuple[int, str, int, float], ...]
    n_enc: int
    ctx2txt_mass: float                 # max context-to-text attention this clip
    seconds: float


@dataclass
class StreamResult:
    memory: ContextMemory
    traces: list[ClipTrace]
    config: StreamConfig
    weights: CompressorWeights


def _ctx2txt_mass(attn_traces: np.ndarray, layout) -> float:
    text = list(layout.text_indices)
    if not text or layout.spec.frames == 0 or attn_traces.shape[0] == 0:
        return 0.0
    ctx_start = layout.spec.frames * layout.spec.patches_per_frame + layout.spec.text_len
    block = attn_traces[:, :, ctx_start:, :][:, :, :, text]
    return float(block.max()) if block.size else 0.0


def run_stream(
    embedder: Embedder,
    question: np.ndarray,
    config: StreamConfig,
    weights: CompressorWeights | None = None,
) -> StreamResult:
    """Stream every clip through the compressor and the context memory."""
    total = embedder.total_frames
    if config.min_frames and total < config.min_frames:
        raise ConfigError(
            f"stream has {total} frames, below the {config.min_frames}-frame floor "
            "(set min_frames=0 to allow short streams)"
        )
    question = np.asarray(question, dtype=np.float64)
    if question.ndim != 2 or question.shape[1] != config.compressor.model_dim:
        raise ShapeError(
            f"question must be (text_len, {config.compressor.model_dim}), got {question.shape}"
        )
    if question.shape[0] < 1:
        raise ConfigError("streaming needs at least one text token")
    if embedder.model_dim != config.compressor.model_dim:
        raise ConfigError(
            f"embedder dim {embedder.model_dim} != compressor dim {config.compressor.model_dim}"
        )
    if weights is None:
        weights = init_weights(config.compressor, embedder.patches, config.window_frames)

    memory = ContextMemory(config.capacity)
    clip_traces: list[ClipTrace] = []
    for n, clip in enumerate(plan_clips(total, config.clip_frames), start=1):
        t0 = time.perf_counter()
        recalled = memory.recall(config.recall_frames)
        current = list(clip)
        window_ids = current + recalled  # current clip first, recalled after
        visual = embedder.frames(window_ids)
        e_in, layout = assemble_input(visual, question, weights.context_seed)
        out = encode(e_in, layout, config.compressor, weights)
        relevance = compute_relevance(out.traces, layout, config.compressor)
        mass = _ctx2txt_mass(out.traces, layout)

        log_start = len(memory.log)
        if config.update_recalled:
            for j, fid in enumerate(recalled):
                pos = len(current) + j
                memory.update_slot(fid, out.context[pos], relevance[pos])
        for i, fid in enumerate(current):
            memory.append(MemoryEntry(out.context[i], float(relevance[i]), fid))

        clip_traces.append(
            ClipTrace(
                clip_index=n,
                current_ids=tuple(current),
                recalled_ids=tuple(recalled),
                relevance=tuple(float(r) for r in relevance),
                mutations=tuple(memory.log[log_start:]),
                n_enc=layout.total_len,
                ctx2txt_mass=mass,
                seconds=time.perf_counter() - t0,
            )
        )
    return StreamResult(memory=memory, traces=clip_traces, config=config, weights=weights)


def assemble_decoder_input(memory: ContextMemory, question: np.ndarray) -> np.ndarray:
    """Question rows followed by the frame-ordered memory snapshot.

    This is the pipeline's terminal output; no language model runs here.
    """
    question = np.asarray(question, dtype=np.float64)
    snapshot = memory.snapshot_for_decoder()
    if snapshot.size == 0:
        return question.copy()
    if snapshot.shape[1] != question.shape[1]:
        raise ShapeError(
            f"memory dim {snapshot.shape[1]} != question dim {question.shape[1]}"
        )
    return np.concatenate([question, snapshot], axis=0)


def write_trace_csv(path, traces: Sequence[ClipTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("clip,n_enc,current_ids,recalled_ids,relevance,ctx2txt_mass,seconds\n")
        for t in traces:
            fh.write(
                f"{t.clip_index},{t.n_enc},"
                f"{';'.join(map(str, t.current_ids))},"
                f"{';'.join(map(str, t.recalled_ids))},"
                f"{';'.join(f'{r:.12g}' for r in t.relevance)},"
                f"{t.ctx2txt_mass:.12g},{t.seconds:.6f}\n"
            )


def write_mutation_csv(path, memory: ContextMemory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,action,frame_index,relevance\n")
        for step, action, frame, relevance in memory.log:
            fh.write(f"{step},{action},{frame},{relevance:.12g}\n")
