import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from src.config import VARIANTS, ExperimentConfig, HPOConfig, load_config, save_config, setup_logging
from src.DataStore import SyntheticSpec, generate_synthetic, read_tensor
from src.Errors import IndexOutOfRange, SynthesisError
from src.Experiment import compare_variants, evaluate_run, run_experiment
from src.SliceView import emit_slice

logger = logging.getLogger("eeg2fmri")

# CLI flag -> ExperimentConfig field, applied only when given.
OVERRIDES = ("dataset", "variant", "output_dir", "rng_seed", "epochs", "learning_rate", "batch_size",
             "theta", "margin", "k", "depth", "latent_features", "optimizer", "grad_clip",
             "dropout", "activation", "window_s", "shift_s", "stft_window", "eeg_resample",
             "n_test", "n_val", "workers", "pretrain_epochs", "encoder_reconstruction")


def _add_experiment_args(parser: argparse.ArgumentParser, seed_required: bool):
    parser.add_argument("--config", help="experiment config JSON (or a run manifest)")
    parser.add_argument("--dataset", help="dataset directory; omitted means synthetic data")
    parser.add_argument("--out", dest="output_dir", help="run directory")
    parser.add_argument("--seed", dest="rng_seed", type=int, required=seed_required)
    parser.add_argument("--variant", choices=VARIANTS)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--theta", type=float)
    parser.add_argument("--margin", type=float)
    parser.add_argument("--k", type=int)
    parser.add_argument("--depth", type=int)
    parser.add_argument("--latent", dest="latent_features", type=int)
    parser.add_argument("--optimizer", choices=("sgd", "adam"))
    parser.add_argument("--grad-clip", dest="grad_clip", type=float)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--activation", choices=("relu", "tanh", "sigmoid", "linear"))
    parser.add_argument("--window-s", dest="window_s", type=float)
    parser.add_argument("--shift-s", dest="shift_s", type=float)
    parser.add_argument("--stft-window", dest="stft_window", choices=("rectangular", "hann"))
    parser.add_argument("--eeg-resample", dest="eeg_resample", choices=("interpolate", "recompute"))
    parser.add_argument("--n-test", dest="n_test", type=int)
    parser.add_argument("--n-val", dest="n_val", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    parser.add_argument("--encoder-reconstruction", dest="encoder_reconstruction",
                        choices=("eeg_path", "both_paths"))
    parser.add_argument("--temporal-encoding", dest="temporal_encoding", action="store_true")
    parser.add_argument("--same-individual-negatives", dest="negatives_same_individual",
                        action="store_true")
    parser.add_argument("--progress", action="store_true", help="show tqdm progress bars")
    parser.add_argument("--save-config", dest="save_config", help="write the resolved config here")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    common.add_argument("--log-file")

    parser = argparse.ArgumentParser(prog="eeg2fmri", description="EEG to fMRI synthesis experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--preset", default="tiny", choices=("tiny", "noddi", "oddball"))
    gen.add_argument("--individuals", type=int)
    gen.add_argument("--duration", dest="duration_s", type=float)
    gen.add_argument("--channels", type=int)
    gen.add_argument("--rate", dest="sampling_rate_hz", type=float)
    gen.add_argument("--grid", type=int, nargs=3)
    gen.add_argument("--tr", dest="tr_s", type=float)
    gen.add_argument("--coupling", choices=("linear", "nonlinear"))
    gen.add_argument("--noise", dest="noise_level", type=float)
    gen.add_argument("--seed", type=int, default=0)

    _add_experiment_args(commands.add_parser("train", parents=[common],
                                             help="train one variant and evaluate it"), True)
    hpo = commands.add_parser("hpo", parents=[common], help="search hyperparameters, then train")
    _add_experiment_args(hpo, True)
    hpo.add_argument("--n-iter", dest="n_iter", type=int, default=20)
    hpo.add_argument("--max-depth", dest="max_depth", type=int, default=8)
    hpo.add_argument("--trial-epochs", dest="trial_epochs", type=int)
    hpo.add_argument("--no-nas", dest="nas", action="store_false")
    _add_experiment_args(commands.add_parser("compare", parents=[common],
                                             help="run every variant and tabulate"), False)

    evaluate = commands.add_parser("evaluate", parents=[common], help="re-score a finished run")
    evaluate.add_argument("--run", required=True, help="run directory")
    evaluate.add_argument("--metrics", help="output CSV (default: <run>/metrics.csv)")

    render = commands.add_parser("render", parents=[common], help="write one axial slice as PGM")
    render.add_argument("--volume", required=True, help="tensor file, [T, X, Y, Z] or [X, Y, Z]")
    render.add_argument("--t", type=int, default=0)
    render.add_argument("--z", type=int)
    render.add_argument("--out", required=True)
    return parser


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {name: getattr(args, name) for name in OVERRIDES if getattr(args, name, None) is not None}
    for flag in ("temporal_encoding", "negatives_same_individual", "progress"):
        if getattr(args, flag, False):
            changes[flag] = True
    cfg = replace(cfg, **changes)
    if args.command == "hpo":
        cfg = replace(cfg, hpo=HPOConfig(True, args.n_iter, args.nas, args.max_depth,
                                         cfg.hpo.tolerance, args.trial_epochs))
    if args.save_config:
        save_config(cfg, args.save_config)
    return cfg.validate()


def _print_report(variant: str, report):
    for name, (mean, std) in report.summary().items():
        print(f"{variant:6s} {name:5s} {mean:.6f} ± {std:.6f}")


def run(args: argparse.Namespace) -> int:
    if args.command == "gen-data":
        overrides = {k: getattr(args, k) for k in ("individuals", "duration_s", "channels",
                                                    "sampling_rate_hz", "grid", "tr_s", "coupling",
                                                    "noise_level") if getattr(args, k) is not None}
        spec = SyntheticSpec.preset(args.preset, seed=args.seed, **overrides)
        print(generate_synthetic(spec, args.out))
    elif args.command in ("train", "hpo"):
        result = run_experiment(experiment_config(args))
        _print_report(result.variant, result.report)
    elif args.command == "compare":
        for variant, report in compare_variants(experiment_config(args)).items():
            _print_report(variant, report)
    elif args.command == "evaluate":
        _print_report("run", evaluate_run(args.run, args.metrics))
    elif args.command == "render":
        volume = read_tensor(args.volume)
        if volume.ndim == 4:
            if not 0 <= args.t < volume.shape[0]:
                raise IndexOutOfRange(f"timestep {args.t} outside 0..{volume.shape[0] - 1}")
            volume = volume[args.t]
        z = volume.shape[2] // 2 if args.z is None else args.z
        print(emit_slice(volume, z, args.out))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    try:
        return run(args)
    except SynthesisError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2
    except Exception as exc:
        logger.exception("unexpected failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
