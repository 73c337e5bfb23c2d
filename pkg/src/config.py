import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from src.DataStore import SyntheticSpec
from src.Errors import ConfigError
from src.Losses import LossConfig
from src.Models import ArchitectureConfig, Procedure, TrainConfig
from src.SignalPipeline import PipelineConfig, steps_in

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

VARIANTS = tuple(p.value for p in Procedure)


def setup_logging(level: str = "INFO", log_file: Optional[str] = None):
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO),
                        format=LOG_FORMAT, handlers=handlers, force=True)


@dataclass
class HPOConfig:
    enabled: bool = False
    n_iter: int = 20
    # Depth-wise search applies to LCOMB; other variants tune at fixed depth.
    nas: bool = True
    max_depth: int = 8
    tolerance: float = 1e-6
    # Training epochs per trial; None uses the experiment's epochs.
    epochs: Optional[int] = None


@dataclass
class ExperimentConfig:
    # Dataset directory; None generates `synthetic` under output_dir/data.
    dataset: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    variant: str = "LCOMB"
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    n_test: int = 1
    n_val: int = 1

    # preprocessing
    window_s: float = 25.2
    step_s: float = 1.8
    shift_s: float = 5.4
    stft_window_s: float = 2.0
    downsample_factor: int = 3
    stft_window: str = "rectangular"
    eeg_resample: str = "interpolate"
    log_offset: float = 1e-6

    # training
    epochs: int = 50
    learning_rate: float = 1e-3
    l1_eeg: float = 1e-5
    l1_fmri: float = 1e-5
    l1_dec: float = 1e-5
    batch_size: int = 8
    theta: float = 0.5
    margin: float = 1.0
    clip_value: float = 0.01
    k: int = 5
    temporal_encoding: bool = False
    optimizer: str = "sgd"
    grad_clip: Optional[float] = None
    pretrain_epochs: int = 10
    encoder_reconstruction: str = "eeg_path"
    negatives_same_individual: bool = False
    # Size of the negative pool as a multiple of the positive count.
    negative_pool: int = 10
    negatives_per_epoch: Optional[int] = None

    # architecture
    depth: int = 1
    latent_features: int = 8
    eeg_widths: Optional[List[int]] = None
    fmri_widths: Optional[List[int]] = None
    decoder_widths: Optional[List[int]] = None
    temporal_hidden: int = 4
    activation: str = "relu"
    dropout: float = 0.5

    hpo: HPOConfig = field(default_factory=HPOConfig)
    output_dir: str = "runs/experiment"
    rng_seed: int = 0
    workers: int = 1
    progress: bool = False
    slice_z: Optional[int] = None
    panel_timestep: int = 0

    def __post_init__(self):
        if isinstance(self.hpo, dict):
            self.hpo = HPOConfig(**self.hpo)
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticSpec(**self.synthetic)

    def validate(self) -> "ExperimentConfig":
        for name in [self.variant] + list(self.variants):
            if name not in VARIANTS:
                raise ConfigError(f"Unknown variant: {name}")
        if steps_in(self.window_s, self.step_s) in (None, 0):
            raise ConfigError(f"window_s={self.window_s} is not a multiple of step_s={self.step_s}")
        if steps_in(self.shift_s, self.step_s) is None:
            raise ConfigError(f"shift_s={self.shift_s} is not a multiple of step_s={self.step_s}")
        if self.n_test < 1 or self.n_val < 0:
            raise ConfigError("need n_test >= 1 and n_val >= 0")
        if self.hpo.enabled and self.n_val < 1:
            raise ConfigError("hyperparameter search needs a validation individual")
        if self.workers < 1 or self.negative_pool < 1:
            raise ConfigError("workers and negative_pool must be >= 1")
        try:
            self.pipeline()
            self.train_config()
            self.architecture()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.stft_window_s, self.step_s, self.window_s, self.shift_s,
                              self.downsample_factor, self.log_offset, self.stft_window, self.eeg_resample)

    def train_config(self, variant: Optional[str] = None) -> TrainConfig:
        return TrainConfig(procedure=Procedure(variant or self.variant), epochs=self.epochs,
                           learning_rate=self.learning_rate, l1_eeg=self.l1_eeg, l1_fmri=self.l1_fmri,
                           l1_dec=self.l1_dec, batch_size=self.batch_size,
                           loss=LossConfig(self.theta, self.margin, clip_value=self.clip_value),
                           k=self.k, temporal_encoding=self.temporal_encoding, rng_seed=self.rng_seed,
                           optimizer=self.optimizer, grad_clip=self.grad_clip,
                           pretrain_epochs=self.pretrain_epochs,
                           encoder_reconstruction=self.encoder_reconstruction,
                           negatives_per_epoch=self.negatives_per_epoch, progress=self.progress)

    def architecture(self) -> ArchitectureConfig:
        return ArchitectureConfig(self.depth, self.latent_features, self.eeg_widths, self.fmri_widths,
                                  self.decoder_widths, self.temporal_hidden, self.activation, self.dropout)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str) -> ExperimentConfig:
    # Accepts a config file or a run manifest (which embeds the config).
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if "config" in data and "config_hash" in data:
        data = data["config"]
    return ExperimentConfig.from_dict(data)


def save_config(cfg: ExperimentConfig, path: str) -> str:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(cfg.to_dict(), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
