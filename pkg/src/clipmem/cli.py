"""Command-line surface.

Subcommands: run (stream a file or a synthetic spec), niah (needle
retrieval suite), ablate (incremental masking/memory ladder), masks
(dump bias patterns), gradcheck (finite-difference suite), version.

Every config field has a flag.  A ``--config`` file holds flat
``key = value`` lines (``#`` comments); keys are flag names with dashes
or underscores, unknown keys are rejected.  Flags override the file.

Exit codes: 0 ok, 2 usage, 3 config error, 4 data error.
"""

from __future__ import annotations

import argparse
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .attention import MaskVariant, build_block, build_guide, build_mask, variant_pattern
from .compressor import CompressorConfig, analytic_weights, init_weights
from .errors import ConfigError, DataFormatError
from .formats import load_weights, write_qvdi
from .gradcheck import check_attention_gradients, check_encoder_gradients
from .harness import (
    LADDER_STEPS,
    POLICIES,
    NiahSpec,
    SyntheticEmbedder,
    analytic_stream_config,
    default_ladder_spec,
    needle_ids_for_trial,
    run_ablation_ladder,
    run_niah,
    write_bitmap_csv,
    write_ladder_csv,
    write_report_csv,
)
from .layout import LayoutSpec, TokenLayout
from .pipeline import (
    FileEmbedder,
    StreamConfig,
    assemble_decoder_input,
    run_stream,
    write_mutation_csv,
    write_trace_csv,
)

_VARIANT_ALIASES = {
    "a": MaskVariant.SINGLE_FRAME,
    "b": MaskVariant.MULTI_CAUSAL,
    "c": MaskVariant.FRAMEWISE,
    "d": MaskVariant.FRAMEWISE_BLOCKED,
    "e": MaskVariant.GUIDED,
    **{v.value: v for v in MaskVariant},
}


def _variant(value: str) -> MaskVariant:
    try:
        return _VARIANT_ALIASES[value]
    except KeyError:
        raise argparse.ArgumentTypeError(
            f"unknown variant {value!r}; choose from {sorted(_VARIANT_ALIASES)}"
        ) from None


def _id_list(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {value!r}") from None


def _add_compressor_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--model-dim", type=int, default=32)
    p.add_argument("--ff-dim", type=int, default=64)
    p.add_argument("--context-per-frame", "--C", type=int, default=16, dest="context_per_frame")
    p.add_argument("--top-heads", type=int, default=2, help="heads averaged per layer for relevance")
    p.add_argument("--relevance-lo", type=int, default=3)
    p.add_argument("--relevance-hi", type=int, default=4)
    p.add_argument("--variant", type=_variant, default=MaskVariant.GUIDED)
    p.add_argument("--guide", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--scale-denominator", choices=("head_dim", "model_dim"), default="head_dim")
    p.add_argument("--seed", type=int, default=0)


def _add_stream_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--clip-frames", "--K", type=int, default=32, dest="clip_frames")
    p.add_argument("--recall-frames", "--Kr", type=int, default=32, dest="recall_frames")
    p.add_argument("--capacity", "--L", type=int, default=256, dest="capacity")
    p.add_argument("--min-frames", type=int, default=64)
    p.add_argument("--update-recalled", action=argparse.BooleanOptionalAction, default=False)


def _add_niah_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames", type=int, default=240, help="video length T")
    p.add_argument("--needles", type=int, default=4)
    p.add_argument("--needle-positions", type=_id_list, default=None)
    p.add_argument("--ceiling", type=float, default=0.2)
    p.add_argument("--needle-alignment", type=float, default=1.2)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--patches", type=int, default=2)
    p.add_argument("--text-len", type=int, default=4)
    p.add_argument("--scene-frames", type=int, default=0)
    p.add_argument("--scene-center-span", type=float, default=0.0)
    p.add_argument("--scene-jitter", type=float, default=0.0)


def _compressor_config(args) -> CompressorConfig:
    return CompressorConfig(
        layers=args.layers,
        heads=args.heads,
        model_dim=args.model_dim,
        ff_dim=args.ff_dim,
        context_per_frame=args.context_per_frame,
        relevance_top_heads=args.top_heads,
        relevance_layers=(args.relevance_lo, args.relevance_hi),
        variant=args.variant,
        guide_on=args.guide,
        scale_denominator=args.scale_denominator,
        seed=args.seed,
    )


def _stream_config(args, compressor: CompressorConfig) -> StreamConfig:
    return StreamConfig(
        clip_frames=args.clip_frames,
        recall_frames=args.recall_frames,
        capacity=args.capacity,
        min_frames=args.min_frames,
        update_recalled=args.update_recalled,
        compressor=compressor,
    )


def _niah_spec(args, model_dim: int) -> NiahSpec:
    return NiahSpec(
        total_frames=args.frames,
        needles=args.needles,
        needle_positions=args.needle_positions,
        distractor_ceiling=args.ceiling,
        needle_alignment=args.needle_alignment,
        trials=args.trials,
        seed=args.seed,
        patches=args.patches,
        model_dim=model_dim,
        text_len=args.text_len,
        scene_frames=args.scene_frames,
        scene_center_span=args.scene_center_span,
        scene_jitter=args.scene_jitter,
    )


def _cmd_run(args) -> int:
    if args.embeddings or args.question:
        if not (args.embeddings and args.question):
            raise ConfigError("file mode needs both --embeddings and --question")
        embedder = FileEmbedder(args.embeddings, args.question)
    else:
        spec = _niah_spec(args, args.model_dim)
        embedder = SyntheticEmbedder(spec, trial=0, needle_ids=needle_ids_for_trial(spec, 0))

    if args.analytic:
        spec_dim = embedder.model_dim
        base = analytic_stream_config(
            NiahSpec(
                total_frames=embedder.total_frames,
                needles=0,
                distractor_ceiling=0.5,
                needle_alignment=1.0,
                model_dim=spec_dim,
                patches=embedder.patches,
                text_len=embedder.text_len,
            ),
            clip_frames=args.clip_frames,
            recall_frames=args.recall_frames,
            capacity=args.capacity,
            update_recalled=args.update_recalled,
            variant=args.variant,
            context_per_frame=args.context_per_frame,
        )
        config = StreamConfig(
            clip_frames=base.clip_frames,
            recall_frames=base.recall_frames,
            capacity=base.capacity,
            min_frames=args.min_frames,
            update_recalled=base.update_recalled,
            compressor=base.compressor,
        )
        weights = analytic_weights(config.compressor, embedder.patches, config.window_frames)
    else:
        compressor = _compressor_config(args)
        config = _stream_config(args, compressor)
        if args.weights:
            weights, dims = load_weights(args.weights)
            if dims["model_dim"] != compressor.model_dim or dims["layers"] != compressor.layers:
                raise ConfigError(
                    f"weight file geometry {dims} does not match flags "
                    f"(model_dim {compressor.model_dim}, layers {compressor.layers})"
                )
        else:
            weights = None

    if embedder.model_dim != config.compressor.model_dim:
        raise ConfigError(
            f"embeddings have dim {embedder.model_dim}; pass --model-dim {embedder.model_dim}"
        )

    question = embedder.question()
    result = run_stream(embedder, question, config, weights=weights)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_trace_csv(out_dir / "traces.csv", result.traces)
    write_mutation_csv(out_dir / "mutations.csv", result.memory)
    write_qvdi(out_dir / "decoder_input.qvdi", assemble_decoder_input(result.memory, question))
    print(
        f"streamed {embedder.total_frames} frames in {len(result.traces)} clips; "
        f"memory holds {len(result.memory)} frames; outputs in {out_dir}"
    )
    return 0


def _cmd_niah(args) -> int:
    spec = _niah_spec(args, args.model_dim)
    config = analytic_stream_config(
        spec,
        clip_frames=args.clip_frames,
        recall_frames=args.recall_frames,
        capacity=args.capacity,
        update_recalled=args.update_recalled,
        variant=args.variant,
        context_per_frame=args.context_per_frame,
    )
    weights = None
    if args.weights:
        weights, _ = load_weights(args.weights)
    policies = args.policy or ["relevance_feedback"]
    reports = [run_niah(spec, config, policy, weights=weights) for policy in policies]
    for r in reports:
        print(f"{r.policy}: hit-rate {r.hit_rate:.4f} ({r.hits}/{r.trials})")
    write_report_csv(args.out, reports)
    if args.bitmap:
        write_bitmap_csv(args.bitmap, reports)
    return 0


def _cmd_ablate(args) -> int:
    spec = default_ladder_spec(trials=args.trials, seed=args.seed)
    reports = run_ablation_ladder(spec, capacity=args.capacity, vanilla_budget=args.vanilla_budget)
    for r in reports:
        print(f"{r.step:>10}: hit-rate {r.hit_rate:.4f} ctx2txt {r.ctx2txt_mass:.3g}")
    write_ladder_csv(args.out, reports)
    return 0


def _grid(allowed: np.ndarray, mark: str = "#", off: str = ".") -> str:
    return "\n".join("".join(mark if cell else off for cell in row) for row in allowed)


def _cmd_masks(args) -> int:
    layout = TokenLayout(LayoutSpec(args.frames, args.patches, args.context, args.text))
    mask = build_mask(layout)
    block = build_block(layout)
    pattern = variant_pattern(layout, args.variant)
    guide_scope = None
    if layout.spec.text_len:
        guide_scope = build_guide(layout, np.ones((layout.total_len, layout.total_len))) > 0
    print(f"# layout: {layout.total_len} tokens "
          f"({args.frames} frames x {args.patches} patches, {args.text} text, "
          f"{args.context} context/frame)")
    print("# framewise mask (rows attend columns marked #)")
    print(_grid(mask))
    print("# context-to-text block")
    print(_grid(block))
    if guide_scope is not None:
        print("# guidance scope")
        print(_grid(guide_scope, mark="g"))
    print(f"# variant pattern: {args.variant.value}")
    print(_grid(pattern))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("matrix,i,j,value\n")
            matrices = [("mask", mask), ("block", block), ("variant", pattern)]
            if guide_scope is not None:
                matrices.append(("guide_scope", guide_scope))
            for name, m in matrices:
                for i in range(m.shape[0]):
                    for j in range(m.shape[1]):
                        fh.write(f"{name},{i},{j},{int(m[i, j])}\n")
    return 0


def _cmd_gradcheck(args) -> int:
    failures = 0
    for k in range(args.instances):
        report = check_attention_gradients(args.seed + k, step=args.step)
        status = "ok" if report.ok(args.tolerance) else "FAIL"
        print(f"{report.name}: max rel err {report.max_rel_error:.3e} [{status}]")
        failures += not report.ok(args.tolerance)
    for k in range(args.instances):
        report = check_encoder_gradients(args.seed + k, layers=args.layers, step=args.step)
        status = "ok" if report.ok(args.tolerance) else "FAIL"
        print(f"{report.name}: max rel err {report.max_rel_error:.3e} [{status}]")
        failures += not report.ok(args.tolerance)
    return 1 if failures else 0


def _cmd_version(_args) -> int:
    try:
        print(metadata.version("clipmem"))
    except metadata.PackageNotFoundError:  # pragma: no cover - source checkout
        print("0.1.0+source")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clipmem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="stream embeddings through the pipeline")
    p_run.add_argument("--config", type=Path, default=None)
    p_run.add_argument("--embeddings", type=Path, default=None, help="QVEM file")
    p_run.add_argument("--question", type=Path, default=None, help="QVTQ file")
    p_run.add_argument("--weights", type=Path, default=None, help="QVWT file")
    p_run.add_argument("--analytic", action=argparse.BooleanOptionalAction, default=False)
    p_run.add_argument("--out-dir", type=Path, default=Path("."))
    _add_stream_flags(p_run)
    _add_compressor_flags(p_run)
    _add_niah_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_niah = sub.add_parser("niah", help="needle retrieval suite")
    p_niah.add_argument("--config", type=Path, default=None)
    p_niah.add_argument("--policy", action="append", choices=POLICIES, default=None)
    p_niah.add_argument("--weights", type=Path, default=None)
    p_niah.add_argument("--out", type=Path, default=Path("niah_report.csv"))
    p_niah.add_argument("--bitmap", type=Path, default=None)
    p_niah.add_argument("--model-dim", type=int, default=16)
    p_niah.add_argument("--context-per-frame", "--C", type=int, default=2, dest="context_per_frame")
    p_niah.add_argument("--variant", type=_variant, default=MaskVariant.GUIDED)
    p_niah.add_argument("--seed", type=int, default=0)
    _add_stream_flags(p_niah)
    _add_niah_flags(p_niah)
    p_niah.set_defaults(func=_cmd_niah, capacity=64)

    p_ablate = sub.add_parser("ablate", help="incremental component ladder")
    p_ablate.add_argument("--config", type=Path, default=None)
    p_ablate.add_argument("--trials", type=int, default=200)
    p_ablate.add_argument("--seed", type=int, default=0)
    p_ablate.add_argument("--capacity", "--L", type=int, default=16, dest="capacity")
    p_ablate.add_argument("--vanilla-budget", type=int, default=64)
    p_ablate.add_argument("--out", type=Path, default=Path("ladder.csv"))
    p_ablate.set_defaults(func=_cmd_ablate)

    p_masks = sub.add_parser("masks", help="dump bias patterns for a layout")
    p_masks.add_argument("--config", type=Path, default=None)
    p_masks.add_argument("--frames", type=int, required=True)
    p_masks.add_argument("--patches", type=int, required=True)
    p_masks.add_argument("--context", type=int, required=True)
    p_masks.add_argument("--text", type=int, required=True)
    p_masks.add_argument("--variant", type=_variant, default=MaskVariant.GUIDED)
    p_masks.add_argument("--csv", type=Path, default=None)
    p_masks.set_defaults(func=_cmd_masks)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--config", type=Path, default=None)
    p_grad.add_argument("--instances", type=int, default=5)
    p_grad.add_argument("--layers", type=int, default=2)
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_version = sub.add_parser("version", help="print the package version")
    p_version.set_defaults(func=_cmd_version)
    return parser


def _parse_config_file(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip().replace("-", "_"), value.strip()))
    return pairs


def _config_to_argv(path: Path, subparser: argparse.ArgumentParser) -> list[str]:
    known: dict[str, argparse.Action] = {}
    for action in subparser._actions:  # argparse has no public dest registry
        if action.dest not in ("help", "config", "func"):
            known[action.dest] = action
    argv: list[str] = []
    for key, value in _parse_config_file(path):
        if key not in known:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        action = known[key]
        flag = "--" + key.replace("_", "-")
        if isinstance(action, argparse.BooleanOptionalAction):
            truthy = value.lower() in ("1", "true", "yes", "on")
            falsy = value.lower() in ("0", "false", "no", "off")
            if not (truthy or falsy):
                raise ConfigError(f"{path}: {key} must be a boolean, got {value!r}")
            argv.append(flag if truthy else "--no-" + key.replace("_", "-"))
        else:
            argv += [flag, value]
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # Inject config-file values before the user's flags so flags win.
        if argv and not argv[0].startswith("-"):
            command = argv[0]
            rest = argv[1:]
            if "--config" in rest:
                sub_actions = parser._subparsers._group_actions[0]
                if command in sub_actions.choices:
                    cfg_path = Path(rest[rest.index("--config") + 1])
                    injected = _config_to_argv(cfg_path, sub_actions.choices[command])
                    argv = [command] + injected + rest
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
