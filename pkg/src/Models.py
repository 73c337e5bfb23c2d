import logging
import warnings
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.Errors import (DegenerateEncoding, DegenerateEncodingWarning, DomainError, EmptyDataset,
                        InvalidProbability, KTooLarge, MissingNegatives, NonFiniteLoss,
                        NumericOverflow, ShapeCompositionError, ShapeMismatch, UntrainedModel)
from src.Losses import (AdversarialMode, LossConfig, clip_grad_norm, contrastive_loss,
                        discriminator_loss, encoder_combined_loss, epv_loss, generator_loss,
                        l1_penalty, mean_abs_distance)
from src.Pairing import PairedInstance
from src.SignalPipeline import EEGSpectrogram, FMRIVolumeSeries
from src.TensorCore import (LayerKind, LayerParams, Tensor, activate, backward,
                            dropout_forward, layer_forward, lift)

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]

STRUCTURAL_KINDS = ("Reshape", "Permute")
TRAINABLE_KINDS = (LayerKind.CONV.value, LayerKind.CONV_TRANSPOSE.value,
                   LayerKind.DENSE.value, LayerKind.GRU.value)

# Fixed stream index per component so a seed means the same weights for every procedure.
COMPONENTS = ("eeg_encoder", "fmri_encoder", "decoder", "discriminator",
              "eeg_head", "fmri_head", "topk_decoder", "batches", "negatives")

TOPK_SUM_EPS = 1e-8


class Role(str, Enum):
    EEG_ENCODER = "EEGEncoder"
    FMRI_ENCODER = "FMRIEncoder"
    DECODER = "Decoder"
    DISCRIMINATOR = "Discriminator"
    TEMPORAL_HEAD = "TemporalHead"


class Procedure(str, Enum):
    AE = "AE"
    LCOMB = "LCOMB"
    GAN = "GAN"
    WGAN = "WGAN"
    TOPK = "TOPK"


def component_seed(rng_seed: int, component: str) -> int:
    sequence = np.random.SeedSequence([int(rng_seed), COMPONENTS.index(component)])
    return int(sequence.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Network descriptions
# ---------------------------------------------------------------------------

# One layer of a NetworkSpec. `units` is output channels / features / hidden size;
# `target` is the per-instance shape for Reshape and the axis order for Permute.
@dataclass
class LayerSpec:
    kind: str
    units: int = 0
    kernel: Tuple[int, ...] = ()
    stride: Tuple[int, ...] = ()
    padding: int = 0
    activation: str = "linear"
    target: Tuple[int, ...] = ()
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in TRAINABLE_KINDS + STRUCTURAL_KINDS + (LayerKind.DROPOUT.value,):
            raise ValueError(f"Unknown layer kind: {self.kind}")
        self.kernel = tuple(int(k) for k in self.kernel)
        self.stride = tuple(int(s) for s in self.stride) or (1,) * len(self.kernel)
        self.target = tuple(int(t) for t in self.target)

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS

    def output_shape(self, shape: Shape) -> Shape:
        shape = tuple(shape)
        if self.kind in (LayerKind.CONV.value, LayerKind.CONV_TRANSPOSE.value):
            rank = len(self.kernel)
            if rank < 1 or len(shape) < rank + 1 or len(self.stride) != rank:
                raise ShapeCompositionError(f"{self.kind} kernel {self.kernel} cannot read {shape}")
            if any(s < 1 for s in self.stride):
                raise ShapeCompositionError(f"{self.kind} stride must be >= 1")
            spatial = []
            for n, k, s in zip(shape[-rank:], self.kernel, self.stride):
                if self.kind == LayerKind.CONV.value:
                    padded = n + 2 * self.padding
                    if k > padded:
                        raise ShapeCompositionError(f"kernel {self.kernel} larger than input {shape}")
                    spatial.append((padded - k) // s + 1)
                else:
                    size = (n - 1) * s + k - 2 * self.padding
                    if size < 1:
                        raise ShapeCompositionError(f"padding {self.padding} crops {shape} to nothing")
                    spatial.append(size)
            return shape[:-rank - 1] + (self.units,) + tuple(spatial)
        if self.kind in (LayerKind.DENSE.value, LayerKind.GRU.value):
            needed = 2 if self.kind == LayerKind.GRU.value else 1
            if len(shape) < needed:
                raise ShapeCompositionError(f"{self.kind} needs rank >= {needed}, got {shape}")
            return shape[:-1] + (self.units,)
        if self.kind == "Reshape":
            if int(np.prod(self.target)) != int(np.prod(shape)):
                raise ShapeCompositionError(f"cannot reshape {shape} to {self.target}")
            return self.target
        if self.kind == "Permute":
            if sorted(self.target) != list(range(len(shape))):
                raise ShapeCompositionError(f"axes {self.target} do not permute {shape}")
            return tuple(shape[a] for a in self.target)
        return shape

    def parameter_shapes(self, shape: Shape) -> Dict[str, Shape]:
        if self.kind == LayerKind.CONV.value:
            c_in = shape[-len(self.kernel) - 1]
            return {"weights": (self.units, c_in) + self.kernel, "biases": (self.units,)}
        if self.kind == LayerKind.CONV_TRANSPOSE.value:
            c_in = shape[-len(self.kernel) - 1]
            return {"weights": (c_in, self.units) + self.kernel, "biases": (self.units,)}
        if self.kind == LayerKind.DENSE.value:
            return {"weights": (shape[-1], self.units), "biases": (self.units,)}
        if self.kind == LayerKind.GRU.value:
            u = self.units
            return {"weights": (shape[-1], 3 * u), "recurrent": (u, 3 * u), "biases": (3 * u,)}
        return {}

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class NetworkSpec:
    role: Role
    input_shape: Shape
    layers: List[LayerSpec]
    dropout: float = 0.5

    def __post_init__(self):
        self.role = Role(self.role)
        self.input_shape = tuple(int(n) for n in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        if not 0.0 <= self.dropout <= 1.0:
            raise InvalidProbability(f"dropout {self.dropout} outside [0, 1]")
        if self.depth < 1:
            raise ShapeCompositionError(f"{self.role.value} needs at least one trainable layer")
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))

    @property
    def depth(self) -> int:
        return sum(1 for layer in self.layers if layer.trainable)

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    def to_dict(self) -> Dict[str, Any]:
        return {"role": self.role.value, "input_shape": list(self.input_shape),
                "layers": [layer.to_dict() for layer in self.layers], "dropout": self.dropout}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkSpec":
        return cls(data["role"], tuple(data["input_shape"]),
                   [LayerSpec(**layer) for layer in data["layers"]], data["dropout"])


class Network:
    # A NetworkSpec with parameters; dropout layers sit after every trainable
    # layer except the last. Auxiliary passes draw dropout masks from a second stream.

    def __init__(self, spec: NetworkSpec, steps: List[LayerSpec],
                 layers: List[Optional[LayerParams]], rng_seed: int):
        self.spec = spec
        self.steps = steps
        self.layers = layers
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng([rng_seed, 1])
        self.auxiliary_rng = np.random.default_rng([rng_seed, 2])

    def forward(self, x, training: bool = False, auxiliary: bool = False) -> Tensor:
        rng = self.auxiliary_rng if auxiliary else self.rng
        x = lift(x)
        lead = x.ndim - len(self.spec.input_shape)
        if lead < 0 or x.shape[lead:] != self.spec.input_shape:
            raise ShapeMismatch(f"{self.spec.role.value} expects {self.spec.input_shape}, got {x.shape}")
        batch_axes = tuple(range(lead))
        for step, params in zip(self.steps, self.layers):
            if step.kind == "Reshape":
                x = x.reshape(x.shape[:lead] + step.target)
            elif step.kind == "Permute":
                x = x.transpose(batch_axes + tuple(lead + a for a in step.target))
            elif step.kind == LayerKind.DROPOUT.value:
                x = dropout_forward(x, step.p, training, rng)
            else:
                x = activate(layer_forward(x, params), step.activation)
        return x

    __call__ = forward

    def parameters(self) -> List[Tensor]:
        return [t for layer in self.layers if layer is not None for t in layer.parameters()]

    def regularized(self) -> List[Tensor]:
        return [t for layer in self.layers if layer is not None for t in layer.regularized()]

    @property
    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def arrays(self) -> List[np.ndarray]:
        return [t.numpy() for t in self.parameters()]

    def load_arrays(self, arrays: Sequence[np.ndarray]):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeMismatch(f"expected {len(params)} parameter blocks, got {len(arrays)}")
        for t, a in zip(params, arrays):
            t.assign(a)


def _glorot(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _init_layer(layer: LayerSpec, shape: Shape, rng: np.random.Generator) -> Optional[LayerParams]:
    shapes = layer.parameter_shapes(shape)
    if not shapes:
        return None
    w_shape = shapes["weights"]
    recurrent = None
    if layer.kind in (LayerKind.CONV.value, LayerKind.CONV_TRANSPOSE.value):
        receptive = int(np.prod(layer.kernel))
        c_in = shape[-len(layer.kernel) - 1]
        weights = _glorot(rng, w_shape, c_in * receptive, layer.units * receptive)
    elif layer.kind == LayerKind.DENSE.value:
        weights = _glorot(rng, w_shape, *w_shape)
    else:
        weights = _glorot(rng, w_shape, w_shape[0], layer.units)
        recurrent = _glorot(rng, shapes["recurrent"], layer.units, layer.units)
    biases = Tensor(np.zeros(shapes["biases"]), requires_grad=True)
    return LayerParams(LayerKind(layer.kind), weights, biases, recurrent,
                       hyper={"stride": layer.stride, "padding": layer.padding})


def build_network(spec: NetworkSpec, rng_seed: int) -> Network:
    rng = np.random.default_rng([rng_seed, 0])
    last_trainable = max(i for i, layer in enumerate(spec.layers) if layer.trainable)
    steps, layers = [], []
    for i, (layer, shape) in enumerate(zip(spec.layers, spec.shapes)):
        steps.append(layer)
        layers.append(_init_layer(layer, shape, rng))
        if layer.trainable and i != last_trainable:
            steps.append(LayerSpec(LayerKind.DROPOUT.value, p=spec.dropout))
            layers.append(None)
    return Network(spec, steps, layers, rng_seed)


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

@dataclass
class ArchitectureConfig:
    depth: int = 1
    latent_features: int = 8
    eeg_widths: Optional[List[int]] = None
    fmri_widths: Optional[List[int]] = None
    decoder_widths: Optional[List[int]] = None
    temporal_hidden: int = 4
    activation: str = "relu"
    dropout: float = 0.5

    def __post_init__(self):
        if self.depth < 1 or self.latent_features < 1 or self.temporal_hidden < 1:
            raise ValueError("depth, latent_features and temporal_hidden must be >= 1")
        if not 0.0 <= self.dropout <= 1.0:
            raise InvalidProbability(f"dropout {self.dropout} outside [0, 1]")
        for name in ("eeg_widths", "fmri_widths", "decoder_widths"):
            widths = getattr(self, name)
            if widths is not None:
                widths = [int(w) for w in widths]
                if len(widths) != self.depth:
                    raise ShapeCompositionError(f"{name} has {len(widths)} entries for depth {self.depth}")
                setattr(self, name, widths)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def monotone_widths(start: int, end: int, count: int) -> List[int]:
    # `count` channel counts stepping evenly from `start` to `end`, ending on `end`.
    return [max(1, int(round(start + (end - start) * (i + 1) / count))) for i in range(count)]


def width_bounds(eeg_shape: Shape, latent: int) -> Dict[str, Tuple[int, int, bool]]:
    # (low, high, increasing) per component: widths move monotonically between
    # the channels coming in and the channels the next stage expects.
    channels = eeg_shape[0]
    return {"eeg": (min(channels, latent), max(channels, latent), latent >= channels),
            "fmri": (1, latent, True),
            "decoder": (1, latent, False)}


def _check_widths(widths: List[int], bounds: Tuple[int, int, bool], name: str):
    low, high, increasing = bounds
    if any(w < low or w > high for w in widths):
        raise ShapeCompositionError(f"{name} widths {widths} outside [{low}, {high}]")
    ordered = sorted(widths, reverse=not increasing)
    if widths != ordered:
        raise ShapeCompositionError(f"{name} widths {widths} are not monotone")


def eeg_encoder_spec(eeg_shape: Shape, arch: ArchitectureConfig) -> NetworkSpec:
    # [C, F, T] -> convolutions over (F, T) -> [T, latent]
    channels, freqs, steps = eeg_shape
    widths = arch.eeg_widths or monotone_widths(channels, arch.latent_features, arch.depth)
    _check_widths(widths, width_bounds(eeg_shape, arch.latent_features)["eeg"], "eeg")
    layers, f = [], freqs
    for width in widths:
        k = min(3, f)
        s = 2 if f > 3 else 1
        layers.append(LayerSpec("Conv", units=width, kernel=(k, 1), stride=(s, 1),
                                activation=arch.activation))
        f = (f - k) // s + 1
    layers += [LayerSpec("Permute", target=(2, 0, 1)),
               LayerSpec("Reshape", target=(steps, widths[-1] * f)),
               LayerSpec("Dense", units=arch.latent_features)]
    return NetworkSpec(Role.EEG_ENCODER, eeg_shape, layers, arch.dropout)


def _volume_convolutions(fmri_shape: Shape, widths: List[int], activation: str) -> Tuple[List[LayerSpec], int]:
    steps, *dims = fmri_shape
    layers = [LayerSpec("Reshape", target=(steps, 1) + tuple(dims))]
    for width in widths:
        kernel = tuple(min(2, n) for n in dims)
        stride = tuple(2 if n >= 2 else 1 for n in dims)
        layers.append(LayerSpec("Conv", units=width, kernel=kernel, stride=stride, activation=activation))
        dims = [(n - k) // s + 1 for n, k, s in zip(dims, kernel, stride)]
    return layers, widths[-1] * int(np.prod(dims))


def fmri_encoder_spec(fmri_shape: Shape, arch: ArchitectureConfig) -> NetworkSpec:
    # [T, X, Y, Z] -> strided 3-D convolutions -> [T, latent]
    widths = arch.fmri_widths or monotone_widths(1, arch.latent_features, arch.depth)
    _check_widths(widths, (1, arch.latent_features, True), "fmri")
    layers, flat = _volume_convolutions(fmri_shape, widths, arch.activation)
    layers += [LayerSpec("Reshape", target=(fmri_shape[0], flat)),
               LayerSpec("Dense", units=arch.latent_features)]
    return NetworkSpec(Role.FMRI_ENCODER, fmri_shape, layers, arch.dropout)


def discriminator_spec(fmri_shape: Shape, arch: ArchitectureConfig, mode: AdversarialMode) -> NetworkSpec:
    # Mirror of the fMRI encoder ending in one score per window.
    widths = arch.fmri_widths or monotone_widths(1, arch.latent_features, arch.depth)
    layers, flat = _volume_convolutions(fmri_shape, widths, arch.activation)
    head = "sigmoid" if AdversarialMode(mode) == AdversarialMode.ENTROPY else "linear"
    layers += [LayerSpec("Reshape", target=(fmri_shape[0] * flat,)),
               LayerSpec("Dense", units=1, activation=head)]
    return NetworkSpec(Role.DISCRIMINATOR, fmri_shape, layers, arch.dropout)


def decoder_spec(fmri_shape: Shape, arch: ArchitectureConfig) -> NetworkSpec:
    # [T, latent] -> dense seed volume of ceil(dim/2) -> stride-1 transposed convs -> [T, X, Y, Z]
    steps, *dims = fmri_shape
    depth = arch.depth
    seed = tuple(-(-n // 2) for n in dims)
    widths = arch.decoder_widths or [max(1, int(round(arch.latent_features
                                                      + (1 - arch.latent_features) * i / depth)))
                                     for i in range(depth)]
    _check_widths(widths, (1, arch.latent_features, False), "decoder")
    layers = [LayerSpec("Dense", units=widths[0] * int(np.prod(seed)), activation=arch.activation),
              LayerSpec("Reshape", target=(steps, widths[0]) + seed)]
    growth = [n - s for n, s in zip(dims, seed)]
    for i, out_channels in enumerate(widths[1:] + [1]):
        kernel = tuple(1 + g // depth + (1 if i < g % depth else 0) for g in growth)
        last = i == depth - 1
        layers.append(LayerSpec("ConvTranspose", units=out_channels, kernel=kernel,
                                stride=(1,) * len(kernel), activation="linear" if last else arch.activation))
    layers.append(LayerSpec("Reshape", target=tuple(fmri_shape)))
    return NetworkSpec(Role.DECODER, (steps, arch.latent_features), layers, arch.dropout)


def temporal_head_spec(steps: int, arch: ArchitectureConfig) -> NetworkSpec:
    # Squeeze the feature axis to 1, then a sequence-to-sequence GRU.
    layers = [LayerSpec("Dense", units=1), LayerSpec("GRU", units=arch.temporal_hidden)]
    return NetworkSpec(Role.TEMPORAL_HEAD, (steps, arch.latent_features), layers, arch.dropout)


def build_architecture(eeg_shape: Shape, fmri_shape: Shape, arch: ArchitectureConfig,
                       procedure: Procedure, temporal_encoding: bool = False) -> Dict[str, NetworkSpec]:
    eeg_shape, fmri_shape = tuple(eeg_shape), tuple(fmri_shape)
    if eeg_shape[-1] != fmri_shape[0]:
        raise ShapeCompositionError(f"EEG window has {eeg_shape[-1]} steps, fMRI window {fmri_shape[0]}")
    procedure = Procedure(procedure)
    specs = {"eeg_encoder": eeg_encoder_spec(eeg_shape, arch),
             "decoder": decoder_spec(fmri_shape, arch)}
    if procedure in (Procedure.LCOMB, Procedure.TOPK):
        specs["fmri_encoder"] = fmri_encoder_spec(fmri_shape, arch)
        if temporal_encoding:
            specs["eeg_head"] = temporal_head_spec(fmri_shape[0], arch)
            specs["fmri_head"] = temporal_head_spec(fmri_shape[0], arch)
    if procedure in (Procedure.GAN, Procedure.WGAN):
        mode = AdversarialMode.ENTROPY if procedure == Procedure.GAN else AdversarialMode.EARTH_MOVER
        specs["discriminator"] = discriminator_spec(fmri_shape, arch, mode)
    return specs


def temporal_encode(activation: Tensor, head: Network, training: bool = False) -> Tensor:
    if head.spec.role != Role.TEMPORAL_HEAD:
        raise ValueError(f"{head.spec.role.value} is not a temporal head")
    return head.forward(activation, training=training)


# ---------------------------------------------------------------------------
# Training configuration and optimizers
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    procedure: Procedure = Procedure.LCOMB
    epochs: int = 50
    learning_rate: float = 1e-3
    l1_eeg: float = 1e-5
    l1_fmri: float = 1e-5
    l1_dec: float = 1e-5
    batch_size: int = 8
    loss: LossConfig = field(default_factory=LossConfig)
    k: int = 5
    temporal_encoding: bool = False
    rng_seed: int = 0
    optimizer: str = "sgd"
    grad_clip: Optional[float] = None
    pretrain_epochs: int = 10
    # Negatives drawn per epoch; None means as many as there are positives.
    negatives_per_epoch: Optional[int] = None
    encoder_reconstruction: str = "eeg_path"
    progress: bool = False

    def __post_init__(self):
        self.procedure = Procedure(self.procedure)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if min(self.l1_eeg, self.l1_fmri, self.l1_dec) < 0:
            raise ValueError("L1 weights must be non-negative")
        if self.batch_size < 1 or self.k < 1:
            raise ValueError("batch_size and k must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"Unknown optimizer: {self.optimizer}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.encoder_reconstruction not in ("eeg_path", "both_paths"):
            raise ValueError(f"Unknown encoder_reconstruction: {self.encoder_reconstruction}")

    @property
    def adversarial_mode(self) -> AdversarialMode:
        if self.procedure == Procedure.WGAN:
            return AdversarialMode.EARTH_MOVER
        if self.procedure == Procedure.GAN:
            return AdversarialMode.ENTROPY
        return self.loss.adversarial_mode

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["procedure"] = self.procedure.value
        data["loss"]["adversarial_mode"] = self.loss.adversarial_mode.value
        return data


class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: Iterable[Tensor]):
        for p in params:
            if p.grad is not None:
                p.assign(p.data - self.learning_rate * p.grad)


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: Dict[int, Tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, params: Iterable[Tensor]):
        for p in params:
            if p.grad is None:
                continue
            m, v, t = self.state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data), 0))
            t += 1
            m = self.beta1 * m + (1 - self.beta1) * p.grad
            v = self.beta2 * v + (1 - self.beta2) * p.grad ** 2
            self.state[id(p)] = (m, v, t)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.assign(p.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps))


def make_optimizer(name: str, learning_rate: float):
    if name == "adam":
        return Adam(learning_rate)
    return SGD(learning_rate)


# ---------------------------------------------------------------------------
# Trained models
# ---------------------------------------------------------------------------

@dataclass
class TrainedModel:
    procedure: Procedure
    architecture: ArchitectureConfig
    eeg_shape: Shape
    fmri_shape: Shape
    networks: Dict[str, Network]
    history: List[Dict[str, float]] = field(default_factory=list)
    trained: bool = False
    # Validation L_EPV before the first update.
    initial_val_epv: Optional[float] = None

    @property
    def eeg_encoder(self) -> Network:
        return self.networks["eeg_encoder"]

    @property
    def decoder(self) -> Network:
        return self.networks["decoder"]

    @property
    def fmri_encoder(self) -> Optional[Network]:
        return self.networks.get("fmri_encoder")

    @property
    def discriminator(self) -> Optional[Network]:
        return self.networks.get("discriminator")

    @property
    def eeg_head(self) -> Optional[Network]:
        return self.networks.get("eeg_head")

    @property
    def fmri_head(self) -> Optional[Network]:
        return self.networks.get("fmri_head")

    # EEG windows [..., C, F, T] -> fMRI windows [..., T, X, Y, Z]; fMRI encoder unused.
    def predict(self, eeg: np.ndarray) -> np.ndarray:
        eeg = np.asarray(eeg, dtype=np.float64)
        if eeg.shape[-3:] != tuple(self.eeg_shape):
            raise ShapeMismatch(f"model expects EEG windows {self.eeg_shape}, got {eeg.shape}")
        encoded = self.eeg_encoder.forward(Tensor(eeg), training=False)
        return self.decoder.forward(encoded, training=False).data

    def synthesize(self, eeg: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise UntrainedModel("model has not been trained")
        return self.predict(eeg)


def synthesize(model: TrainedModel, eeg: EEGSpectrogram) -> FMRIVolumeSeries:
    return FMRIVolumeSeries(model.synthesize(eeg.values), eeg.step_seconds, log_scaled=True)


def initialize_model(cfg: TrainConfig, arch: ArchitectureConfig, eeg_shape: Shape,
                     fmri_shape: Shape) -> TrainedModel:
    specs = build_architecture(eeg_shape, fmri_shape, arch, cfg.procedure, cfg.temporal_encoding)
    networks = {name: build_network(spec, component_seed(cfg.rng_seed, name))
                for name, spec in specs.items()}
    return TrainedModel(cfg.procedure, arch, tuple(eeg_shape), tuple(fmri_shape), networks)


def _stack(pairs: Sequence[PairedInstance]) -> Tuple[Tensor, Tensor]:
    return Tensor(np.stack([p.eeg for p in pairs])), Tensor(np.stack([p.fmri for p in pairs]))


def reconstruction_loss(model: TrainedModel, pairs: Sequence[PairedInstance]) -> float:
    # L_EPV of the inference path over all positive pairs.
    positives = [p for p in pairs if p.label == 1]
    if not positives:
        raise EmptyDataset("no positive pairs to score")
    eeg, fmri = _stack(positives)
    return epv_loss(fmri, Tensor(model.predict(eeg.data)), voxel_dims=3).item()


# ---------------------------------------------------------------------------
# Top-k ranking
# ---------------------------------------------------------------------------

def topk_weights(query: np.ndarray, training_encodings: Sequence[np.ndarray],
                 k: int) -> Tuple[np.ndarray, np.ndarray]:
    # Indices of the k best-correlated encodings and their normalized weights.
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(training_encodings):
        raise KTooLarge(f"k={k} exceeds {len(training_encodings)} training encodings")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.std() == 0:
        raise DegenerateEncoding("query encoding has zero variance")

    candidates, correlations = [], []
    for i, encoding in enumerate(training_encodings):
        flat = np.asarray(encoding, dtype=np.float64).ravel()
        if flat.shape != q.shape:
            raise ShapeMismatch(f"encoding {i} has {flat.size} values, query {q.size}")
        if flat.std() == 0:
            logger.warning("training encoding %d has zero variance; excluded from ranking", i)
            warnings.warn(f"training encoding {i} has zero variance", DegenerateEncodingWarning)
            continue
        candidates.append(i)
        correlations.append(np.corrcoef(q, flat)[0, 1])
    if k > len(candidates):
        raise KTooLarge(f"k={k} exceeds {len(candidates)} usable training encodings")

    correlations = np.asarray(correlations)
    order = np.argsort(-correlations, kind="stable")[:k]
    weights = correlations[order]
    total = weights.sum()
    # Near-cancelling correlations fall back to an even blend.
    weights = np.full(k, 1.0 / k) if abs(total) < TOPK_SUM_EPS else weights / total
    return np.asarray(candidates)[order], weights


def topk_combination(query: np.ndarray, training_encodings: Sequence[np.ndarray], k: int) -> np.ndarray:
    indices, weights = topk_weights(query, training_encodings, k)
    combined = np.zeros_like(np.asarray(training_encodings[indices[0]], dtype=np.float64))
    for index, weight in zip(indices, weights):
        combined = combined + weight * np.asarray(training_encodings[index], dtype=np.float64)
    return combined


# ---------------------------------------------------------------------------
# Training procedures
# ---------------------------------------------------------------------------

class ModelTrainer:
    # Runs one procedure over a TrainedModel. Every step is guarded: numeric
    # failures surface as NonFiniteLoss with the epoch/batch where they happened.

    def __init__(self, model: TrainedModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate)
        self.batch_rng = np.random.default_rng(component_seed(cfg.rng_seed, "batches"))
        self.negative_rng = np.random.default_rng(component_seed(cfg.rng_seed, "negatives"))
        self.phase = cfg.procedure.value
        self.epoch = 0
        self.batch = 0

    # --- parameter groups ---------------------------------------------------

    def _params(self, *names: str) -> List[Tensor]:
        return [t for name in names if name in self.model.networks
                for t in self.model.networks[name].parameters()]

    def _regularized(self, *names: str) -> List[Tensor]:
        return [t for name in names if name in self.model.networks
                for t in self.model.networks[name].regularized()]

    @property
    def encoder_names(self) -> Tuple[str, ...]:
        return ("eeg_encoder", "eeg_head", "fmri_encoder", "fmri_head")

    def _zero_grad(self):
        for network in self.model.networks.values():
            network.zero_grad()

    # --- failure handling ---------------------------------------------------

    def _non_finite(self, component: str, reason: str, **values) -> NonFiniteLoss:
        diagnostics = {"procedure": self.cfg.procedure.value, "phase": self.phase,
                       "epoch": self.epoch, "batch": self.batch, "component": component,
                       "learning_rate": self.cfg.learning_rate, "grad_clip": self.cfg.grad_clip,
                       "reason": reason}
        diagnostics.update(values)
        logger.error("non-finite values in %s during %s (epoch %d, batch %d): %s",
                     component, self.phase, self.epoch, self.batch, reason)
        return NonFiniteLoss(f"non-finite {component} at epoch {self.epoch}, batch {self.batch}: {reason}",
                             diagnostics)

    def _guard(self, step, *args):
        try:
            return step(*args)
        except (NumericOverflow, DomainError) as exc:
            raise self._non_finite("forward", str(exc)) from exc

    def _apply(self, params: List[Tensor]):
        for p in params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise self._non_finite("gradient", "gradient contains NaN/Inf")
        if self.cfg.grad_clip is not None:
            norm = clip_grad_norm(params, self.cfg.grad_clip)
            logger.debug("gradient norm %.6g", norm)
        self.optimizer.step(params)
        for p in params:
            if not np.isfinite(p.data).all():
                raise self._non_finite("parameters", "update produced NaN/Inf parameters")

    # --- AE and LCOMB -------------------------------------------------------

    def _contrastive(self, eeg_pos: Tensor, fmri_pos: Tensor, eeg_neg: Tensor, fmri_neg: Tensor) -> Tensor:
        m = self.model
        if self.cfg.temporal_encoding:
            eeg_pos, eeg_neg = m.eeg_head(eeg_pos, training=True), m.eeg_head(eeg_neg, training=True)
            fmri_pos, fmri_neg = m.fmri_head(fmri_pos, training=True), m.fmri_head(fmri_neg, training=True)
        n_pos, n_neg = eeg_pos.shape[0], eeg_neg.shape[0]
        margin = self.cfg.loss.margin
        pulled = contrastive_loss(mean_abs_distance(eeg_pos, fmri_pos), 1, margin)
        pushed = contrastive_loss(mean_abs_distance(eeg_neg, fmri_neg), 0, margin)
        return (pulled * n_pos + pushed * n_neg) * (1.0 / (n_pos + n_neg))

    def compute_gradients(self, positives: Sequence[PairedInstance],
                          negatives: Sequence[PairedInstance] = ()) -> Dict[str, float]:
        # Populates .grad for one AE or LCOMB step without updating anything.
        # Only the positive reconstruction path draws from the main dropout streams.
        cfg, m = self.cfg, self.model
        eeg, fmri = _stack(positives)
        encoded = m.eeg_encoder(eeg, training=True)
        l_r = epv_loss(fmri, m.decoder(encoded, training=True), voxel_dims=3)
        l1_dec = l1_penalty(self._regularized("decoder"), cfg.l1_dec)

        if cfg.procedure == Procedure.AE:
            loss = l_r + l1_penalty(self._regularized("eeg_encoder"), cfg.l1_eeg) + l1_dec
            self._zero_grad()
            backward(loss, params=self._params("eeg_encoder", "decoder"))
            return {"loss": loss.item(), "l_r": l_r.item()}

        if not negatives:
            raise MissingNegatives(f"{cfg.procedure.value} needs negative pairs")
        fmri_encoded = m.fmri_encoder(fmri, training=True)
        l_r_encoders = l_r
        if cfg.encoder_reconstruction == "both_paths":
            fmri_decoded = m.decoder(fmri_encoded, training=True, auxiliary=True)
            l_r_fmri = epv_loss(fmri, fmri_decoded, voxel_dims=3)
            l_r_encoders = (l_r + l_r_fmri) * 0.5
        eeg_neg, fmri_neg = _stack(negatives)
        eeg_neg_encoded = m.eeg_encoder(eeg_neg, training=True, auxiliary=True)
        l_c = self._contrastive(encoded, fmri_encoded, eeg_neg_encoded,
                                m.fmri_encoder(fmri_neg, training=True))
        l_e = (encoder_combined_loss(l_c, l_r_encoders, cfg.loss.theta)
               + l1_penalty(self._regularized("eeg_encoder", "eeg_head"), cfg.l1_eeg)
               + l1_penalty(self._regularized("fmri_encoder", "fmri_head"), cfg.l1_fmri))

        encoder_params = self._params(*self.encoder_names)
        self._zero_grad()
        backward(l_e, params=encoder_params)
        encoder_grads = [(p, p.grad) for p in encoder_params]
        self._zero_grad()
        backward(l_r + l1_dec, params=self._params("decoder"))
        for p, g in encoder_grads:
            p.grad = g
        return {"loss": l_e.item(), "l_r": l_r.item(), "l_c": l_c.item()}

    def train_step(self, positives, negatives=()) -> Dict[str, float]:
        record = self._guard(self.compute_gradients, positives, negatives)
        names = ("eeg_encoder", "decoder") if self.cfg.procedure == Procedure.AE \
            else self.encoder_names + ("decoder",)
        self._apply(self._params(*names))
        return record

    # --- GAN and WGAN -------------------------------------------------------

    def discriminator_step(self, positives: Sequence[PairedInstance]) -> float:
        # One critic update with the generator held fixed; returns the value before the update.
        m, mode = self.model, self.cfg.adversarial_mode
        eeg, fmri = _stack(positives)
        fake = m.decoder(m.eeg_encoder(eeg, training=True), training=True).detach()
        loss = discriminator_loss(m.discriminator(fmri, training=True),
                                  m.discriminator(fake, training=True), mode)
        params = self._params("discriminator")
        self._zero_grad()
        backward(loss, params=params)
        self._apply(params)
        if mode == AdversarialMode.EARTH_MOVER:
            clip = self.cfg.loss.clip_value
            for p in params:
                p.assign(np.clip(p.data, -clip, clip))
        return -loss.item()

    def generator_step(self, positives: Sequence[PairedInstance]) -> Dict[str, float]:
        cfg, m = self.cfg, self.model
        eeg, fmri = _stack(positives)
        fake = m.decoder(m.eeg_encoder(eeg, training=True), training=True)
        loss = (generator_loss(m.discriminator(fake, training=True), cfg.adversarial_mode)
                + l1_penalty(self._regularized("eeg_encoder"), cfg.l1_eeg)
                + l1_penalty(self._regularized("decoder"), cfg.l1_dec))
        params = self._params("eeg_encoder", "decoder")
        self._zero_grad()
        backward(loss, params=params)
        self._apply(params)
        return {"gen": loss.item(), "l_r": epv_loss(fmri, fake.detach(), voxel_dims=3).item()}

    # --- epochs -------------------------------------------------------------

    def _batches(self, count: int) -> List[np.ndarray]:
        order = self.batch_rng.permutation(count)
        size = self.cfg.batch_size
        return [order[i:i + size] for i in range(0, count, size)]

    def _epoch_negatives(self, negatives: Sequence[PairedInstance], count: int) -> List[PairedInstance]:
        wanted = count if self.cfg.negatives_per_epoch is None else self.cfg.negatives_per_epoch
        replace = wanted > len(negatives)
        chosen = self.negative_rng.choice(len(negatives), size=wanted, replace=replace)
        return [negatives[i] for i in chosen]

    def _run_epochs(self, epochs: int, phase: str, run_epoch, validation) -> None:
        self.phase = phase
        for epoch in tqdm(range(epochs), desc=phase, disable=not self.cfg.progress):
            self.epoch = epoch
            records = run_epoch()
            summary = {"epoch": len(self.model.history), "phase": phase}
            for key in records[0] if records else ():
                summary[key] = float(np.mean([r[key] for r in records]))
            if validation:
                summary["val_epv"] = self._guard(reconstruction_loss, self.model, validation)
            self.model.history.append(summary)
            logger.info("%s epoch %d/%d: %s", phase, epoch + 1, epochs,
                        " ".join(f"{k}={v:.6g}" for k, v in summary.items() if isinstance(v, float)))

    def _pairwise_epoch(self, positives, negatives):
        records = []
        epoch_negatives = self._epoch_negatives(negatives, len(positives)) if negatives else []
        for self.batch, batch in enumerate(self._batches(len(positives))):
            pos = [positives[i] for i in batch]
            if self.cfg.procedure == Procedure.AE:
                neg = []
            else:
                neg = [epoch_negatives[i % len(epoch_negatives)] for i in batch]
            record = self.train_step(pos, neg)
            logger.debug("batch %d: %s", self.batch, record)
            records.append(record)
        return records

    def _adversarial_epoch(self, positives):
        records = []
        for self.batch, batch in enumerate(self._batches(len(positives))):
            pos = [positives[i] for i in batch]
            value = self._guard(self.discriminator_step, pos)
            record = self._guard(self.generator_step, pos)
            record["disc"] = value
            records.append(record)
        return records

    def _topk_epoch(self, combinations: np.ndarray, targets: np.ndarray):
        cfg, decoder = self.cfg, self.model.decoder
        records = []
        for self.batch, batch in enumerate(self._batches(len(targets))):
            def step():
                pred = decoder(Tensor(combinations[batch]), training=True)
                l_r = epv_loss(Tensor(targets[batch]), pred, voxel_dims=3)
                loss = l_r + l1_penalty(decoder.regularized(), cfg.l1_dec)
                self._zero_grad()
                backward(loss, params=decoder.parameters())
                return {"loss": loss.item(), "l_r": l_r.item()}
            record = self._guard(step)
            self._apply(decoder.parameters())
            records.append(record)
        return records

    def _fit_topk_decoder(self, positives: Sequence[PairedInstance], validation) -> None:
        # Encoders stay frozen; a fresh decoder learns from top-k blended encodings.
        cfg, m = self.cfg, self.model
        eeg, fmri = _stack(positives)
        encodings = m.eeg_encoder.forward(eeg, training=False).data
        if cfg.k > len(encodings) - 1:
            raise KTooLarge(f"k={cfg.k} needs more than {len(encodings)} training windows")
        combinations = np.stack([
            topk_combination(encodings[i], [encodings[j] for j in range(len(encodings)) if j != i], cfg.k)
            for i in range(len(encodings))])
        m.networks["decoder"] = build_network(m.decoder.spec, component_seed(cfg.rng_seed, "topk_decoder"))
        self._run_epochs(cfg.epochs, "TOPK-decoder",
                         lambda: self._topk_epoch(combinations, fmri.data), validation)

    def fit(self, positives: Sequence[PairedInstance], negatives: Sequence[PairedInstance] = (),
            validation: Optional[Sequence[PairedInstance]] = None) -> TrainedModel:
        procedure = self.cfg.procedure
        if not positives:
            raise EmptyDataset("training needs at least one positive pair")
        if procedure in (Procedure.LCOMB, Procedure.TOPK) and not negatives:
            raise MissingNegatives(f"{procedure.value} needs negative pairs")
        logger.info("training %s on %d positive and %d negative pairs",
                    procedure.value, len(positives), len(negatives))
        if validation:
            self.model.initial_val_epv = self._guard(reconstruction_loss, self.model, validation)

        if procedure in (Procedure.AE, Procedure.LCOMB):
            self._run_epochs(self.cfg.epochs, procedure.value,
                             lambda: self._pairwise_epoch(positives, negatives), validation)
        elif procedure in (Procedure.GAN, Procedure.WGAN):
            self._run_epochs(self.cfg.epochs, procedure.value,
                             lambda: self._adversarial_epoch(positives), validation)
        else:
            self._run_epochs(self.cfg.pretrain_epochs, "TOPK-encoders",
                             lambda: self._pairwise_epoch(positives, negatives), validation)
            self._fit_topk_decoder(positives, validation)
        self.model.trained = True
        return self.model


def train(pairs: Sequence[PairedInstance], cfg: TrainConfig, architecture: Optional[ArchitectureConfig] = None,
          validation: Optional[Sequence[PairedInstance]] = None) -> TrainedModel:
    positives = [p for p in pairs if p.label == 1]
    negatives = [p for p in pairs if p.label == 0]
    if not positives:
        raise EmptyDataset("training needs at least one positive pair")
    model = initialize_model(cfg, architecture or ArchitectureConfig(),
                             positives[0].eeg.shape, positives[0].fmri.shape)
    validation = [p for p in validation or () if p.label == 1]
    return ModelTrainer(model, cfg).fit(positives, negatives, validation or None)


# ---------------------------------------------------------------------------
# Serialization helpers for checkpoints
# ---------------------------------------------------------------------------

def model_state(model: TrainedModel) -> Tuple[Dict[str, Any], List[np.ndarray]]:
    header = {"procedure": model.procedure.value,
              "architecture": model.architecture.to_dict(),
              "eeg_shape": list(model.eeg_shape),
              "fmri_shape": list(model.fmri_shape),
              "trained": model.trained,
              "history": model.history,
              "initial_val_epv": model.initial_val_epv,
              "networks": {}}
    arrays = []
    for name, network in model.networks.items():
        blocks = network.arrays()
        header["networks"][name] = {"spec": network.spec.to_dict(), "seed": network.rng_seed,
                                    "shapes": [list(b.shape) for b in blocks]}
        arrays.extend(blocks)
    return header, arrays


def restore_model(header: Dict[str, Any], arrays: Sequence[np.ndarray]) -> TrainedModel:
    networks, cursor = {}, 0
    for name, entry in header["networks"].items():
        network = build_network(NetworkSpec.from_dict(entry["spec"]), entry["seed"])
        count = len(entry["shapes"])
        network.load_arrays(arrays[cursor:cursor + count])
        cursor += count
        networks[name] = network
    if cursor != len(arrays):
        raise ShapeMismatch(f"checkpoint holds {len(arrays)} blocks, networks use {cursor}")
    return TrainedModel(Procedure(header["procedure"]), ArchitectureConfig(**header["architecture"]),
                        tuple(header["eeg_shape"]), tuple(header["fmri_shape"]), networks,
                        list(header["history"]), bool(header["trained"]), header.get("initial_val_epv"))
