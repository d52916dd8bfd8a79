#!/usr/bin/env python3
"""
语音增强命令行入口

    synth      按精确信噪比合成带噪清单
    train      训练 BGRU + Blockformer 掩码模型
    enhance    用检查点增强单个 WAV 文件
    eval       在清单的某个划分上计算 SNR / STOI 并输出分组统计
    gradcheck  运行梯度检查套件

退出码：0 成功，1 用法错误，2 运行时错误
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from audio_dsp import read_wav, write_wav
from blockformer import ModelConfig, forward
from config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    BATCH_SIZE,
    CHECKPOINT_EVERY,
    D_FF,
    D_MODEL,
    EVAL_WORKERS,
    GRU_HIDDEN,
    HOP,
    LEARNING_RATE,
    LOSS_CAP_DB,
    MASTER_SEED,
    N_HEADS,
    N_REPEATS,
    SEGMENT_LEN,
    SNR_GRID,
    SPLIT_RATIOS,
    TRAIN_SEED,
    TRAIN_STEPS,
    WIN_LEN,
)
from gradcheck_suite import run_suite
from metrics import eval_manifest, rows_to_frame, write_eval_rows, write_summary
from mixgen import DatasetSpec, build_manifest, read_manifest, split_counts, write_manifest
from training import TrainConfig, load_checkpoint, load_train_config, model_from_checkpoint, train_loop
from visualize import create_visualizations, plot_enhancement, write_svgs

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

MODEL_FLAGS = {
    "win_len": WIN_LEN,
    "hop": HOP,
    "hidden": GRU_HIDDEN,
    "d_model": D_MODEL,
    "heads": N_HEADS,
    "repeats": N_REPEATS,
    "d_ff": D_FF,
}
TRAIN_FLAGS = {
    "segment_len": (int, SEGMENT_LEN),
    "batch_size": (int, BATCH_SIZE),
    "steps": (int, TRAIN_STEPS),
    "lr": (float, LEARNING_RATE),
    "beta1": (float, ADAM_BETA1),
    "beta2": (float, ADAM_BETA2),
    "adam_eps": (float, ADAM_EPS),
    "seed": (int, TRAIN_SEED),
    "checkpoint_every": (int, CHECKPOINT_EVERY),
    "loss_cap_db": (float, LOSS_CAP_DB),
}


class Colors:
    RED = '\033[31m'
    GREEN = '\033[32m'
    YELLOW = '\033[33m'
    BLUE = '\033[34m'
    CYAN = '\033[36m'
    RESET = '\033[0m'


class CliParser(argparse.ArgumentParser):
    """用法错误统一以退出码 1 结束"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _flatten(values) -> List[float]:
    return [v for group in values for v in group]


def _banner(title: str, color: str = Colors.BLUE) -> None:
    print(f"\n{color}{'='*60}{Colors.RESET}")
    print(f"{color}{title}{Colors.RESET}")
    print(f"{color}{'='*60}{Colors.RESET}")


# ----------------------------------------------------------------------
# 子命令
# ----------------------------------------------------------------------
def cmd_synth(args) -> int:
    splits = _flatten(args.splits)
    spec = DatasetSpec(
        clean_dir=args.clean_dir,
        noise_dir=args.noise_dir,
        snr_grid=_flatten(args.snr_grid),
        splits=tuple(splits),
        pairs_per_clean=args.pairs_per_clean,
        master_seed=args.seed,
    ).validate()

    _banner("Synthesizing Mixture Manifest")
    entries = build_manifest(spec)
    write_manifest(args.out_manifest, entries, spec)
    print(f"{Colors.GREEN}✓ Wrote {len(entries)} entries to {args.out_manifest}{Colors.RESET}")
    for split, count in split_counts(entries).items():
        print(f"  {split}: {count}")
    return EXIT_OK


def _train_config(args, parser: argparse.ArgumentParser) -> TrainConfig:
    train_overrides = {key: getattr(args, key) for key in TRAIN_FLAGS}
    model_overrides = {key: getattr(args, key) for key in MODEL_FLAGS if getattr(args, key) is not None}

    if args.config:
        cfg = load_train_config(
            args.config,
            manifest=args.manifest,
            out_ckpt=args.out_ckpt,
            log_path=args.log,
            **train_overrides,
        )
        cfg.model = replace(cfg.model, **model_overrides)
        return cfg

    if not args.manifest:
        parser.error("train needs --manifest (or --config with a manifest entry)")
    defaults = {key: default for key, (_, default) in TRAIN_FLAGS.items()}
    defaults.update({k: v for k, v in train_overrides.items() if v is not None})
    return TrainConfig(
        manifest=args.manifest,
        model=ModelConfig(**model_overrides),
        out_ckpt=args.out_ckpt or "enhancer.ckpt",
        log_path=args.log,
        **defaults,
    )


def cmd_train(args, parser) -> int:
    cfg = _train_config(args, parser).validate()

    _banner("Training Enhancer")
    print(f"Manifest: {cfg.manifest}")
    print(f"Model: {cfg.model}")
    print(f"Steps: {cfg.steps}  Batch: {cfg.batch_size}  LR: {cfg.lr:g}")
    print(f"Checkpoint: {cfg.out_ckpt}")

    result = train_loop(cfg, resume=args.resume, progress=not args.quiet)
    if result.losses:
        print(f"{Colors.CYAN}loss: first {result.losses[0]:.4f} dB -> last {result.losses[-1]:.4f} dB{Colors.RESET}")
    print(f"{Colors.GREEN}✓ Checkpoint saved to {cfg.out_ckpt} (step {result.checkpoint.step}){Colors.RESET}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    noisy = read_wav(args.input)
    enhanced, _ = forward(model, noisy)
    write_wav(args.output, enhanced)
    print(f"{Colors.GREEN}✓ Enhanced {args.input} -> {args.output} ({enhanced.duration:.3f} s){Colors.RESET}")

    if args.plot:
        plot_enhancement(noisy, enhanced, Path(args.plot), model.config.win_len, model.config.hop)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt)) if args.ckpt else None
    entries = read_manifest(args.manifest)

    _banner(f"Evaluating split '{args.split}' ({'passthrough' if model is None else args.ckpt})")
    report = eval_manifest(model, entries, args.split, workers=args.workers, progress=not args.quiet)
    write_eval_rows(args.out_rows, report.rows)
    write_summary(args.out_summary, report.summary)
    print(f"{Colors.GREEN}✓ {len(report.rows)} rows -> {args.out_rows}{Colors.RESET}")
    print(f"{Colors.GREEN}✓ Summary -> {args.out_summary}{Colors.RESET}")

    overall = report.summary[report.summary["group"] == "all"].set_index("metric")
    print(f"  input SNR  {overall.loc['input_snr_db', 'mean']:+.2f} dB")
    print(f"  output SNR {overall.loc['output_snr_db', 'mean']:+.2f} dB")
    print(f"  STOI       {overall.loc['stoi_in', 'mean']:.3f} -> {overall.loc['stoi_out', 'mean']:.3f}")

    if args.svg:
        write_svgs(report.summary, Path(args.svg))
    if args.plots:
        create_visualizations(rows_to_frame(report.rows), report.summary, Path(args.plots), args.split)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_suite(args.config, corrupt=args.corrupt_gradient, seed=args.seed)
    return EXIT_OK if report.all_passed else EXIT_RUNTIME


# ----------------------------------------------------------------------
# 参数解析
# ----------------------------------------------------------------------
def build_parser() -> CliParser:
    parser = CliParser(description="BGRU + Blockformer speech enhancement toolkit")
    parser.add_argument("--quiet", action="store_true", help="only log warnings; hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="synthesize a noisy-mixture manifest")
    p.add_argument("--clean-dir", required=True, help="directory of clean speech WAVs (searched recursively)")
    p.add_argument("--noise-dir", required=True, help="directory of noise WAVs (searched recursively)")
    p.add_argument("--out-manifest", required=True, help="manifest file to write")
    p.add_argument("--snr-grid", type=float_list, nargs="+", default=[list(SNR_GRID)],
                   help="target SNRs in dB, comma- or space-separated (default: -10 -5 0 5 10)")
    p.add_argument("--splits", type=float_list, nargs="+", default=[list(SPLIT_RATIOS)],
                   help="train,val,test ratios summing to 1 (default: 0.7,0.2,0.1)")
    p.add_argument("--seed", type=int, default=MASTER_SEED, help=f"master seed (default: {MASTER_SEED})")
    p.add_argument("--pairs-per-clean", type=int, default=0,
                   help="(noise, SNR) pairs drawn per clean file; 0 uses every combination (default: 0)")

    p = sub.add_parser("train", help="train the enhancer on a manifest's train split")
    p.add_argument("--manifest", help="manifest produced by synth")
    p.add_argument("--out-ckpt", help="final checkpoint path (default: enhancer.ckpt)")
    p.add_argument("--config", help="YAML training config; flags given here override it")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log", help="per-step log file (step, loss dB, wall ms)")
    for key, (kind, default) in TRAIN_FLAGS.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None,
                       help=f"{key.replace('_', ' ')} (default: {default:g})")
    for key, default in MODEL_FLAGS.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int, default=None,
                       help=f"model {key.replace('_', ' ')} (default: {default})")

    p = sub.add_parser("enhance", help="enhance one 16 kHz WAV file")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--in", dest="input", required=True, help="noisy input WAV")
    p.add_argument("--out", dest="output", required=True, help="enhanced output WAV (PCM16 mono)")
    p.add_argument("--plot", help="optional PNG with waveform/spectrogram comparison")

    p = sub.add_parser("eval", help="score a manifest split with SNR and STOI")
    p.add_argument("--ckpt", help="trained checkpoint; omit for the passthrough baseline")
    p.add_argument("--manifest", required=True, help="manifest produced by synth")
    p.add_argument("--split", default="test", help="split to evaluate (default: test)")
    p.add_argument("--out-rows", required=True, help="per-entry TSV output")
    p.add_argument("--out-summary", required=True, help="grouped summary TSV output")
    p.add_argument("--svg", help="directory for snr_curves.svg and stoi_boxes.svg")
    p.add_argument("--plots", help="directory for matplotlib PNG figures")
    p.add_argument("--workers", type=int, default=EVAL_WORKERS, help=f"parallel workers (default: {EVAL_WORKERS})")

    p = sub.add_parser("gradcheck", help="run the gradient-check suite")
    p.add_argument("--config", choices=["tiny", "default"], default="tiny", help="model size for the end-to-end check")
    p.add_argument("--corrupt-gradient", action="store_true", help="tamper with analytic gradients (negative control)")
    p.add_argument("--seed", type=int, default=0, help="seed for the random test inputs (default: 0)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )

    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args, parser)
        if args.command == "enhance":
            return cmd_enhance(args)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_gradcheck(args)
    except Exception as e:
        logging.debug("command failed", exc_info=True)
        print(f"{Colors.RED}✗ {args.command} failed: {e}{Colors.RESET}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
