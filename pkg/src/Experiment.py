import json
import logging
import os
import platform
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import matplotlib
import numpy as np
import scipy

from src.config import ExperimentConfig, config_hash, load_config
from src.DataStore import (SyntheticSpec, generate_synthetic, load_checkpoint, load_dataset,
                           load_dataset_spec, save_checkpoint)
from src.Errors import NonFiniteLoss, PipelineError, SynthesisError
from src.HyperSearch import (HyperParamSpace, Params, TrialLog, architecture_from, bo_optimize,
                             nas_depth_search)
from src.Metrics import MetricsReport, evaluate_all, write_metrics_table
from src.Models import Procedure, TrainedModel, reconstruction_loss, train
from src.Pairing import (PairedInstance, RecordingSession, make_negative_pairs, make_positive_pairs,
                         split_by_individual)
from src.SliceView import emit_window_slices, render_comparison

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "model.ckpt"
MANIFEST_FILE = "manifest.json"
DIAGNOSTICS_FILE = "diagnostics.json"
TRIALS_FILE = "trials.jsonl"
PANEL_FILE = "comparison.png"
SLICES_DIR = "slices"


@dataclass
class RunResult:
    variant: str
    output_dir: str
    report: MetricsReport
    model: TrainedModel
    # Config after hyperparameter search (the input config when search is off).
    tuned: ExperimentConfig
    sample_truth: np.ndarray
    sample_prediction: np.ndarray
    hpo: Dict[str, Any] = field(default_factory=dict)


@contextmanager
def stage(name: str):
    # Re-raises any failure as PipelineError naming the stage; NonFiniteLoss passes through.
    logger.info("stage: %s", name)
    try:
        yield
    except (PipelineError, NonFiniteLoss):
        raise
    except Exception as exc:
        logger.error("stage %s failed: %s", name, exc)
        raise PipelineError(name, exc) from exc


def _write_json(path: str, data: Dict[str, Any]) -> str:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2, sort_keys=True, default=str)
        handle.write("\n")
    return path


def _versions() -> Dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__}


def dataset_path(cfg: ExperimentConfig) -> str:
    # A configured dataset is used as is; otherwise synthetic data lives under the run.
    if cfg.dataset is not None:
        return cfg.dataset
    path = os.path.join(cfg.output_dir, "data")
    spec = cfg.synthetic or SyntheticSpec.preset("tiny", seed=cfg.rng_seed)
    if os.path.exists(os.path.join(path, "dataset.json")) and load_dataset_spec(path) == spec:
        logger.info("reusing synthetic dataset %s", path)
    else:
        generate_synthetic(spec, path)
    return path


def prepare_sessions(cfg: ExperimentConfig) -> List[RecordingSession]:
    return load_dataset(dataset_path(cfg), cfg.pipeline())


def build_pairs(sessions: Sequence[RecordingSession], cfg: ExperimentConfig,
                procedure: Procedure) -> List[PairedInstance]:
    positives = make_positive_pairs(sessions)
    if procedure not in (Procedure.LCOMB, Procedure.TOPK):
        return positives
    negatives = make_negative_pairs(sessions, limit=cfg.negative_pool * len(positives),
                                    rng_seed=cfg.rng_seed, same_individual=cfg.negatives_same_individual)
    logger.info("%d positive and %d negative pairs", len(positives), len(negatives))
    return positives + negatives


def tuned_config(cfg: ExperimentConfig, params: Params, depth: int,
                 eeg_shape: Tuple[int, ...]) -> ExperimentConfig:
    arch = cfg.architecture()
    if any("_width_" in name for name in params):
        arch = architecture_from(params, depth, eeg_shape, arch)
    return replace(cfg, learning_rate=float(params["learning_rate"]), l1_eeg=float(params["l1_eeg"]),
                   l1_fmri=float(params["l1_fmri"]), l1_dec=float(params["l1_dec"]),
                   theta=float(params.get("theta", cfg.theta)), batch_size=int(params["batch_size"]),
                   depth=arch.depth, eeg_widths=arch.eeg_widths, fmri_widths=arch.fmri_widths,
                   decoder_widths=arch.decoder_widths, hpo=replace(cfg.hpo, enabled=False))


def run_hpo(cfg: ExperimentConfig, pairs: Sequence[PairedInstance], validation: Sequence[PairedInstance],
            log_path: Optional[str] = None) -> Tuple[ExperimentConfig, Dict[str, Any]]:
    # LCOMB with nas grows depth; everything else tunes at the configured depth,
    # keeping layer widths that are already fixed in the config.
    if not validation:
        raise SynthesisError("hyperparameter search needs validation pairs")
    eeg_shape = tuple(pairs[0].eeg.shape)
    log = TrialLog(log_path) if log_path else None
    epochs = cfg.hpo.epochs if cfg.hpo.epochs is not None else cfg.epochs
    contrastive = cfg.variant in (Procedure.LCOMB.value, Procedure.TOPK.value)

    def evaluate(depth: int, params: Params) -> float:
        candidate = tuned_config(cfg, params, depth, eeg_shape)
        model = train(pairs, replace(candidate.train_config(), epochs=epochs, progress=False),
                      candidate.architecture())
        return reconstruction_loss(model, validation)

    if cfg.hpo.nas and cfg.variant == Procedure.LCOMB.value:
        result = nas_depth_search(lambda d: HyperParamSpace.default(d, eeg_shape, cfg.latent_features),
                                  evaluate, cfg.hpo.n_iter, cfg.rng_seed, cfg.hpo.max_depth,
                                  cfg.hpo.tolerance, cfg.workers, log, cfg.progress)
        depth, best = result.depth, result.best
        summary = {"depth": depth, "cap_reached": result.cap_reached,
                   "per_depth": [t.to_record() for t in result.per_depth]}
    else:
        widths_fixed = cfg.eeg_widths is not None
        space = HyperParamSpace.default(cfg.depth, None if widths_fixed else eeg_shape, cfg.latent_features,
                                        contrastive)
        depth = cfg.depth
        best = bo_optimize(space, lambda params: evaluate(depth, params), cfg.hpo.n_iter, cfg.rng_seed,
                           depth, cfg.workers, log, cfg.progress)
        summary = {"depth": depth}
    summary["best"] = best.to_record()
    logger.info("search picked depth %d with validation loss %.6g", depth, best.score)
    return tuned_config(cfg, best.params, depth, eeg_shape), summary


def _sample(model: TrainedModel, sessions: Sequence[RecordingSession]) -> Tuple[np.ndarray, np.ndarray]:
    window = next(w for s in sessions for w in s.windows)
    return window.fmri.volumes, model.synthesize(window.eeg.values[None])[0]


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    # data -> preprocess -> split -> pairs -> (search) -> train -> evaluate -> outputs
    cfg.validate()
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    manifest: Dict[str, Any] = {"config": cfg.to_dict(), "config_hash": config_hash(cfg),
                                "seed": cfg.rng_seed, "variant": cfg.variant,
                                "versions": _versions(), "status": "running"}
    logger.info("experiment %s (%s) -> %s", cfg.variant, manifest["config_hash"][:12], out)

    with stage("data"):
        sessions = prepare_sessions(cfg)
    with stage("split"):
        train_sessions, val_sessions, test_sessions = split_by_individual(
            sessions, cfg.n_test, cfg.n_val, cfg.rng_seed)
    with stage("pairing"):
        pairs = build_pairs(train_sessions, cfg, Procedure(cfg.variant))
        validation = make_positive_pairs(val_sessions)

    tuned, summary = cfg, {}
    if cfg.hpo.enabled:
        with stage("hpo"):
            tuned, summary = run_hpo(cfg, pairs, validation, os.path.join(out, TRIALS_FILE))
        manifest["hpo"] = summary
        manifest["tuned_config"] = tuned.to_dict()

    try:
        with stage("train"):
            model = train(pairs, tuned.train_config(), tuned.architecture(), validation or None)
    except NonFiniteLoss as exc:
        diagnostics = dict(exc.diagnostics, stage="train", message=str(exc))
        _write_json(os.path.join(out, DIAGNOSTICS_FILE), diagnostics)
        manifest.update(status="non_finite", outputs={"diagnostics": DIAGNOSTICS_FILE})
        _write_json(os.path.join(out, MANIFEST_FILE), manifest)
        raise

    with stage("evaluate"):
        report = evaluate_all(model, test_sessions, cfg.workers)

    with stage("outputs"):
        write_metrics_table({cfg.variant: report}, os.path.join(out, METRICS_FILE))
        save_checkpoint(model, os.path.join(out, CHECKPOINT_FILE))
        truth, prediction = _sample(model, test_sessions)
        slices = os.path.join(out, SLICES_DIR)
        emit_window_slices(truth, slices, "real", cfg.slice_z)
        emit_window_slices(prediction, slices, cfg.variant.lower(), cfg.slice_z)
        render_comparison(truth, {cfg.variant: prediction}, os.path.join(out, PANEL_FILE),
                          cfg.panel_timestep, cfg.slice_z)
        manifest.update(status="ok", test_windows=report.count,
                        outputs={"metrics": METRICS_FILE, "checkpoint": CHECKPOINT_FILE,
                                 "slices": SLICES_DIR, "panel": PANEL_FILE})
        _write_json(os.path.join(out, MANIFEST_FILE), manifest)
    return RunResult(cfg.variant, out, report, model, tuned, truth, prediction, summary)


def evaluate_run(run_dir: str, output: Optional[str] = None) -> MetricsReport:
    # Re-scores a finished run from its manifest and checkpoint.
    cfg = replace(load_config(os.path.join(run_dir, MANIFEST_FILE)), output_dir=run_dir)
    with stage("load"):
        model = load_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE))
        sessions = prepare_sessions(cfg)
    with stage("split"):
        _, _, test_sessions = split_by_individual(sessions, cfg.n_test, cfg.n_val, cfg.rng_seed)
    with stage("evaluate"):
        report = evaluate_all(model, test_sessions, cfg.workers)
    write_metrics_table({cfg.variant: report}, output or os.path.join(run_dir, METRICS_FILE))
    return report


def compare_variants(cfg: ExperimentConfig) -> Dict[str, MetricsReport]:
    # Runs every configured variant on the same split and writes one combined table.
    # With search enabled LCOMB runs first and its architecture is shared.
    cfg.validate()
    os.makedirs(cfg.output_dir, exist_ok=True)
    order = list(cfg.variants)
    if cfg.hpo.enabled and Procedure.LCOMB.value in order:
        order.sort(key=lambda v: v != Procedure.LCOMB.value)

    shared = cfg
    if cfg.dataset is None:
        # One dataset for every variant.
        shared = replace(cfg, dataset=dataset_path(cfg))
    results: Dict[str, RunResult] = {}
    failures: Dict[str, Dict[str, Any]] = {}
    for variant in order:
        sub = replace(shared, variant=variant, output_dir=os.path.join(cfg.output_dir, variant))
        try:
            result = run_experiment(sub)
        except NonFiniteLoss as exc:
            logger.error("variant %s diverged: %s", variant, exc)
            failures[variant] = exc.diagnostics
            continue
        results[variant] = result
        if cfg.hpo.enabled and variant == Procedure.LCOMB.value:
            t = result.tuned
            shared = replace(shared, depth=t.depth, eeg_widths=t.eeg_widths,
                             fmri_widths=t.fmri_widths, decoder_widths=t.decoder_widths)
    if not results:
        raise PipelineError("compare", RuntimeError(f"all variants failed: {sorted(failures)}"))

    reports = {v: results[v].report for v in cfg.variants if v in results}
    write_metrics_table(reports, os.path.join(cfg.output_dir, METRICS_FILE))
    truth = next(iter(results.values())).sample_truth
    render_comparison(truth, {v: results[v].sample_prediction for v in reports},
                      os.path.join(cfg.output_dir, PANEL_FILE), cfg.panel_timestep, cfg.slice_z)
    _write_json(os.path.join(cfg.output_dir, MANIFEST_FILE),
                {"config": cfg.to_dict(), "config_hash": config_hash(cfg), "seed": cfg.rng_seed,
                 "versions": _versions(), "variants": list(reports), "failed": failures,
                 "status": "ok" if not failures else "partial"})
    return reports
