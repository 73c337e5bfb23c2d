import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.Errors import ChecksumMismatch, FormatError, InvalidSpec
from src.Models import TrainedModel, model_state, restore_model
from src.Pairing import RecordingSession
from src.SignalPipeline import EEGRecording, FMRIVolumeSeries, PipelineConfig

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"E2FTNSR1"
CHECKPOINT_MAGIC = b"E2FCKPT1"

# Baseline and gain of the synthetic BOLD signal before log-scaling.
BOLD_BASELINE = 100.0
BOLD_GAIN = 10.0


# ---------------------------------------------------------------------------
# Tensor files: magic, uint32 rank, uint64 dims, little-endian float64 payload
# ---------------------------------------------------------------------------

def encode_tensor(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f8")
    header = TENSOR_MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes()


def decode_tensor(data: bytes, path: str = "<memory>") -> np.ndarray:
    if data[:8] != TENSOR_MAGIC:
        raise FormatError(path, 0, "bad magic header")
    if len(data) < 12:
        raise FormatError(path, 8, "missing rank")
    (ndim,) = struct.unpack_from("<I", data, 8)
    dims_end = 12 + 8 * ndim
    if len(data) < dims_end:
        raise FormatError(path, 12, f"truncated shape descriptor for rank {ndim}")
    shape = struct.unpack_from(f"<{ndim}Q", data, 12)
    expected = dims_end + 8 * int(np.prod(shape, dtype=np.int64))
    if len(data) != expected:
        raise FormatError(path, min(len(data), expected),
                          f"payload holds {len(data) - dims_end} bytes, shape {shape} needs {expected - dims_end}")
    return np.frombuffer(data, dtype="<f8", offset=dims_end).reshape(shape).astype(np.float64)


def write_tensor(path: str, array: np.ndarray) -> str:
    # Returns the SHA-256 of the written bytes.
    payload = encode_tensor(array)
    with open(path, "wb") as handle:
        handle.write(payload)
    return hashlib.sha256(payload).hexdigest()


def read_tensor(path: str, checksum: Optional[str] = None) -> np.ndarray:
    with open(path, "rb") as handle:
        data = handle.read()
    if checksum is not None and hashlib.sha256(data).hexdigest() != checksum:
        raise ChecksumMismatch(f"{path} does not match its recorded checksum")
    return decode_tensor(data, path)


def _write_json(path: str, data: Dict[str, Any]):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.pos, exc.msg) from exc


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    individuals: int = 4
    duration_s: float = 120.0
    channels: int = 4
    sampling_rate_hz: float = 20.0
    grid: Tuple[int, int, int] = (6, 6, 3)
    tr_s: float = 1.8
    coupling: str = "linear"
    noise_level: float = 0.0
    shift_s: float = 5.4
    bands: int = 3
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(n) for n in self.grid)

    def validate(self) -> "SyntheticSpec":
        if self.individuals < 1 or self.channels < 1 or self.bands < 1:
            raise InvalidSpec("individuals, channels and bands must be >= 1")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise InvalidSpec(f"grid must be three positive sizes, got {self.grid}")
        if self.sampling_rate_hz <= 0 or self.tr_s <= 0 or self.duration_s <= 0:
            raise InvalidSpec("rates and durations must be positive")
        if self.duration_s < 2 * self.tr_s:
            raise InvalidSpec("recording must hold at least two volumes")
        if self.coupling not in ("linear", "nonlinear"):
            raise InvalidSpec(f"Unknown coupling: {self.coupling}")
        if self.noise_level < 0 or self.shift_s < 0:
            raise InvalidSpec("noise_level and shift_s must be non-negative")
        return self

    @classmethod
    def preset(cls, name: str, **overrides) -> "SyntheticSpec":
        presets = {
            "noddi": dict(individuals=10, channels=64, sampling_rate_hz=1000.0, tr_s=2.16,
                          duration_s=300 * 2.16, grid=(64, 64, 30)),
            "oddball": dict(individuals=14, channels=64, sampling_rate_hz=1000.0, tr_s=2.0,
                            duration_s=340.0, grid=(64, 64, 32)),
            "tiny": dict(individuals=4, channels=3, sampling_rate_hz=10.0, tr_s=1.8,
                         duration_s=120.0, grid=(4, 4, 2)),
        }
        if name not in presets:
            raise InvalidSpec(f"Unknown preset: {name}")
        values = dict(presets[name])
        values.update(overrides)
        return cls(**values)

    @property
    def volumes(self) -> int:
        return int(np.floor(self.duration_s / self.tr_s + 1e-9))

    @property
    def band_frequencies(self) -> np.ndarray:
        nyquist = self.sampling_rate_hz / 2.0
        return nyquist * np.arange(1, self.bands + 1) / (self.bands + 1)


def _envelopes(t: np.ndarray, periods: np.ndarray, phases: np.ndarray) -> np.ndarray:
    # Smooth positive band envelopes [bands, len(t)].
    return 1.0 + 0.5 * np.sin(2 * np.pi * t[None, :] / periods[:, None] + phases[:, None])


def generate_synthetic(spec: SyntheticSpec, path: str) -> str:
    # EEG carriers per band modulated by individual envelopes and channel
    # signatures; BOLD is a fixed voxel mixing of the envelopes lagged by shift_s.
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    os.makedirs(path, exist_ok=True)
    voxels = int(np.prod(spec.grid))
    mixing = rng.uniform(0.2, 1.0, size=(voxels, spec.bands)) / spec.bands
    write_tensor(os.path.join(path, "mixing.bin"), mixing)

    n_samples = int(round(spec.duration_s * spec.sampling_rate_hz))
    t_eeg = np.arange(n_samples) / spec.sampling_rate_hz
    t_bold = np.arange(spec.volumes) * spec.tr_s
    frequencies = spec.band_frequencies
    ids = []
    for n in range(spec.individuals):
        individual_id = f"sub-{n + 1:02d}"
        ids.append(individual_id)
        signature = rng.uniform(0.5, 1.5, size=(spec.channels, spec.bands))
        periods = rng.uniform(20.0, 60.0, size=spec.bands)
        phases = rng.uniform(0.0, 2 * np.pi, size=spec.bands)
        carrier_phase = rng.uniform(0.0, 2 * np.pi, size=(spec.channels, spec.bands))

        envelope = _envelopes(t_eeg, periods, phases)
        carriers = np.sin(2 * np.pi * frequencies[None, :, None] * t_eeg[None, None, :]
                          + carrier_phase[:, :, None])
        eeg = np.einsum("cb,bt,cbt->ct", signature, envelope, carriers)
        eeg += spec.noise_level * rng.standard_normal(eeg.shape)

        drive = _envelopes(t_bold - spec.shift_s, periods, phases)
        response = mixing @ drive
        if spec.coupling == "nonlinear":
            response = np.tanh(response)
        bold = BOLD_BASELINE + BOLD_GAIN * response
        bold += spec.noise_level * rng.standard_normal(bold.shape)
        fmri = np.maximum(bold.T.reshape((spec.volumes,) + spec.grid), 1e-3)

        directory = os.path.join(path, individual_id)
        os.makedirs(directory, exist_ok=True)
        checksums = {"eeg.bin": write_tensor(os.path.join(directory, "eeg.bin"), eeg),
                     "fmri.bin": write_tensor(os.path.join(directory, "fmri.bin"), fmri),
                     "drive.bin": write_tensor(os.path.join(directory, "drive.bin"), drive)}
        _write_json(os.path.join(directory, "manifest.json"), {
            "individual_id": individual_id, "session_id": "run-1",
            "sampling_rate_hz": spec.sampling_rate_hz, "tr_s": spec.tr_s,
            "channels": spec.channels, "grid": list(spec.grid), "volumes": spec.volumes,
            "checksums": checksums})

    _write_json(os.path.join(path, "dataset.json"), {"spec": asdict(spec), "individuals": ids})
    logger.info("generated %d synthetic individuals in %s", spec.individuals, path)
    return path


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

@dataclass
class Recording:
    individual_id: str
    session_id: str
    eeg: EEGRecording
    fmri: FMRIVolumeSeries


def load_recordings(path: str) -> List[Recording]:
    index = _read_json(os.path.join(path, "dataset.json"))
    recordings = []
    for individual_id in index["individuals"]:
        directory = os.path.join(path, individual_id)
        manifest = _read_json(os.path.join(directory, "manifest.json"))
        checksums = manifest.get("checksums", {})
        eeg = read_tensor(os.path.join(directory, "eeg.bin"), checksums.get("eeg.bin"))
        fmri = read_tensor(os.path.join(directory, "fmri.bin"), checksums.get("fmri.bin"))
        eeg_path = os.path.join(directory, "eeg.bin")
        if eeg.ndim != 2 or eeg.shape[0] != manifest["channels"]:
            raise FormatError(eeg_path, 0, f"expected [{manifest['channels']}, time], got {eeg.shape}")
        if fmri.shape[1:] != tuple(manifest["grid"]):
            raise FormatError(os.path.join(directory, "fmri.bin"), 0,
                              f"expected grid {manifest['grid']}, got {fmri.shape[1:]}")
        recordings.append(Recording(individual_id, manifest.get("session_id", "run-1"),
                                    EEGRecording(eeg, manifest["sampling_rate_hz"]),
                                    FMRIVolumeSeries(fmri, manifest["tr_s"])))
    return recordings


def load_dataset(path: str, cfg: Optional[PipelineConfig] = None) -> List[RecordingSession]:
    cfg = cfg or PipelineConfig()
    return [RecordingSession.from_recordings(r.individual_id, r.eeg, r.fmri, cfg, r.session_id)
            for r in load_recordings(path)]


def load_dataset_spec(path: str) -> SyntheticSpec:
    return SyntheticSpec(**_read_json(os.path.join(path, "dataset.json"))["spec"])


def load_ground_truth(path: str, individual_id: str) -> Tuple[np.ndarray, np.ndarray]:
    # (mixing [voxels, bands], lagged band drive [bands, volumes]) of a synthetic dataset.
    return (read_tensor(os.path.join(path, "mixing.bin")),
            read_tensor(os.path.join(path, individual_id, "drive.bin")))


# ---------------------------------------------------------------------------
# Checkpoints: magic, uint64 header length, JSON header, float64 blocks
# ---------------------------------------------------------------------------

def save_checkpoint(model: TrainedModel, path: str) -> str:
    header, arrays = model_state(model)
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<Q", len(encoded)))
        handle.write(encoded)
        for array in arrays:
            handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    logger.info("saved checkpoint %s (%d parameter blocks)", path, len(arrays))
    return path


def load_checkpoint(path: str) -> TrainedModel:
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, "bad checkpoint magic")
    if len(data) < 16:
        raise FormatError(path, 8, "missing header length")
    (length,) = struct.unpack_from("<Q", data, 8)
    if len(data) < 16 + length:
        raise FormatError(path, 16, "truncated checkpoint header")
    try:
        header = json.loads(data[16:16 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, 16, f"unreadable header: {exc}") from exc

    offset = 16 + length
    arrays = []
    for entry in header["networks"].values():
        for shape in entry["shapes"]:
            size = 8 * int(np.prod(shape, dtype=np.int64))
            if offset + size > len(data):
                raise FormatError(path, offset, f"truncated parameter block of shape {shape}")
            arrays.append(np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset)
                          .reshape(shape).astype(np.float64))
            offset += size
    if offset != len(data):
        raise FormatError(path, offset, "trailing bytes after parameter blocks")
    return restore_model(header, arrays)
