import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.signal import get_window

from src.Errors import (AlreadyScaled, InvalidFactor, RecordingTooShort,
                        ShiftNotMultiple, TooFewPoints, WindowTooLong)

logger = logging.getLogger(__name__)

# Offset added before the natural log so zero voxels stay finite.
LOG_OFFSET = 1e-6

_WINDOW_FUNCTIONS = {"rectangular": "boxcar", "hann": "hann"}


# Raw multichannel EEG, samples laid out [channels, time].
@dataclass
class EEGRecording:
    samples: np.ndarray
    sampling_rate_hz: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError(f"EEG samples must be [channels, time], got {self.samples.shape}")
        if self.sampling_rate_hz <= 0:
            raise ValueError("sampling_rate_hz must be positive")
        if np.isnan(self.samples).any():
            raise ValueError("EEG samples contain NaN")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return self.samples.shape[1] / self.sampling_rate_hz


# Magnitude spectrogram laid out [channels, freq, time].
@dataclass
class EEGSpectrogram:
    values: np.ndarray
    step_seconds: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"spectrogram must be [channels, freq, time], got {self.values.shape}")
        if (self.values < 0).any():
            raise ValueError("spectrogram magnitudes must be non-negative")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def freq_bins(self) -> int:
        return self.values.shape[1]

    @property
    def time_steps(self) -> int:
        return self.values.shape[2]


# fMRI volumes laid out [time, x, y, z].
@dataclass
class FMRIVolumeSeries:
    volumes: np.ndarray
    tr_seconds: float
    log_scaled: bool = False

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float64)
        if self.volumes.ndim != 4:
            raise ValueError(f"fMRI volumes must be [time, x, y, z], got {self.volumes.shape}")
        if self.tr_seconds <= 0:
            raise ValueError("tr_seconds must be positive")
        if self.log_scaled and not np.isfinite(self.volumes).all():
            raise ValueError("log-scaled volumes must be finite")

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(self.volumes.shape[1:])

    @property
    def time_steps(self) -> int:
        return self.volumes.shape[0]


# One EEG window with the fMRI window that follows it by the haemodynamic shift.
@dataclass
class AlignedWindow:
    t_eeg: float
    t_fmri: float
    eeg: EEGSpectrogram
    fmri: FMRIVolumeSeries


@dataclass
class PipelineConfig:
    stft_window_s: float = 2.0
    step_s: float = 1.8
    window_s: float = 25.2
    shift_s: float = 5.4
    downsample_factor: int = 3
    log_offset: float = LOG_OFFSET
    stft_window: str = "rectangular"
    # "interpolate" resamples the STFT frames; "recompute" hops the STFT by step_s.
    eeg_resample: str = "interpolate"

    def __post_init__(self):
        if self.stft_window not in _WINDOW_FUNCTIONS:
            raise ValueError(f"Unknown STFT window: {self.stft_window}")
        if self.eeg_resample not in ("interpolate", "recompute"):
            raise ValueError(f"Unknown EEG resampling mode: {self.eeg_resample}")
        if min(self.stft_window_s, self.step_s, self.window_s) <= 0 or self.shift_s < 0:
            raise ValueError("pipeline durations must be positive")

    @property
    def window_steps(self) -> int:
        return steps_in(self.window_s, self.step_s)


def steps_in(duration_s: float, step_s: float) -> Optional[int]:
    # Whole number of steps in a duration, or None when it is not a multiple.
    ratio = duration_s / step_s
    nearest = int(round(ratio))
    return nearest if abs(ratio - nearest) < 1e-6 else None


def _samples_in(seconds: float, rate_hz: float, what: str) -> int:
    count = seconds * rate_hz
    nearest = int(round(count))
    if nearest < 1 or abs(count - nearest) > 1e-6:
        raise ValueError(f"{what} of {seconds} s is not a whole number of samples at {rate_hz} Hz")
    return nearest


def stft(rec: EEGRecording, window_seconds: float, window: str = "rectangular",
         hop_seconds: Optional[float] = None) -> EEGSpectrogram:
    # One-sided magnitude STFT per channel; frames are non-overlapping unless
    # a shorter hop is requested.
    width = _samples_in(window_seconds, rec.sampling_rate_hz, "STFT window")
    hop = width if hop_seconds is None else _samples_in(hop_seconds, rec.sampling_rate_hz, "STFT hop")
    n_samples = rec.samples.shape[1]
    if width > n_samples:
        raise WindowTooLong(f"window of {width} samples exceeds recording of {n_samples}")
    if window not in _WINDOW_FUNCTIONS:
        raise ValueError(f"Unknown STFT window: {window}")

    frames = (n_samples - width) // hop + 1
    index = np.arange(frames)[:, None] * hop + np.arange(width)[None, :]
    taper = get_window(_WINDOW_FUNCTIONS[window], width)
    segments = rec.samples[:, index] * taper
    magnitudes = np.abs(np.fft.rfft(segments, axis=-1))
    return EEGSpectrogram(magnitudes.transpose(0, 2, 1), hop / rec.sampling_rate_hz)


def log_scale(fmri: FMRIVolumeSeries, offset: float = LOG_OFFSET) -> FMRIVolumeSeries:
    if fmri.log_scaled:
        raise AlreadyScaled("fMRI series is already log-scaled")
    shifted = fmri.volumes + offset
    if (shifted <= 0).any():
        raise ValueError("log-scaling needs volume values above -offset")
    return FMRIVolumeSeries(np.log(shifted), fmri.tr_seconds, log_scaled=True)


def downsample_spatial(fmri: FMRIVolumeSeries, factor: int) -> FMRIVolumeSeries:
    # Block means over factor^3 voxels; trailing partial blocks use their actual members.
    if int(factor) != factor or factor < 1:
        raise InvalidFactor(f"downsampling factor must be a positive integer, got {factor}")
    factor = int(factor)
    reduced = fmri.volumes
    for axis in (1, 2, 3):
        length = reduced.shape[axis]
        starts = np.arange(0, length, factor)
        counts = np.diff(np.append(starts, length))
        shape = [1, 1, 1, 1]
        shape[axis] = -1
        reduced = np.add.reduceat(reduced, starts, axis=axis) / counts.reshape(shape)
    return FMRIVolumeSeries(reduced, fmri.tr_seconds, fmri.log_scaled)


def resample_time(series: np.ndarray, src_step_s: float, dst_step_s: float, axis: int = 0) -> np.ndarray:
    # Linear interpolation onto a uniform grid covering the same span.
    if src_step_s <= 0 or dst_step_s <= 0:
        raise ValueError("time steps must be positive")
    series = np.asarray(series, dtype=np.float64)
    n_src = series.shape[axis]
    if n_src < 2:
        raise TooFewPoints(f"need at least 2 time points, got {n_src}")
    span = (n_src - 1) * src_step_s
    n_dst = int(np.floor(span / dst_step_s + 1e-9)) + 1
    src_t = np.arange(n_src) * src_step_s
    dst_t = np.minimum(np.arange(n_dst) * dst_step_s, src_t[-1])
    return np.apply_along_axis(lambda row: np.interp(dst_t, src_t, row), axis, series)


def window_count(t_common: int, window_steps: int, shift_steps: int) -> int:
    return max(0, (t_common - shift_steps) // window_steps)


def partition_windows(eeg: EEGSpectrogram, fmri: FMRIVolumeSeries, window_s: float,
                      shift_s: float) -> List[AlignedWindow]:
    step = eeg.step_seconds
    if abs(fmri.tr_seconds - step) > 1e-9:
        raise ValueError(f"EEG step {step} s and fMRI TR {fmri.tr_seconds} s differ; resample first")
    window_steps = steps_in(window_s, step)
    if window_steps is None or window_steps < 1:
        raise ValueError(f"window of {window_s} s is not a multiple of the {step} s step")
    shift_steps = steps_in(shift_s, step)
    if shift_steps is None:
        raise ShiftNotMultiple(f"shift of {shift_s} s is not a multiple of the {step} s step")

    t_common = min(eeg.time_steps, fmri.time_steps)
    count = window_count(t_common, window_steps, shift_steps)
    if count < 1:
        raise RecordingTooShort(
            f"{t_common} common steps cannot hold a {window_steps}-step window shifted by {shift_steps}")

    windows = []
    for i in range(count):
        start = i * window_steps
        bold = start + shift_steps
        windows.append(AlignedWindow(
            t_eeg=start * step,
            t_fmri=bold * step,
            eeg=EEGSpectrogram(eeg.values[:, :, start:start + window_steps], step),
            fmri=FMRIVolumeSeries(fmri.volumes[bold:bold + window_steps], step, fmri.log_scaled)))
    logger.debug("partitioned %d common steps into %d windows", t_common, count)
    return windows


def preprocess_recording(eeg: EEGRecording, fmri: FMRIVolumeSeries,
                         cfg: PipelineConfig) -> List[AlignedWindow]:
    # Raw recordings -> aligned model-ready windows.
    if cfg.eeg_resample == "recompute":
        spectrogram = stft(eeg, cfg.stft_window_s, cfg.stft_window, hop_seconds=cfg.step_s)
    else:
        spectrogram = stft(eeg, cfg.stft_window_s, cfg.stft_window)
        spectrogram = EEGSpectrogram(
            resample_time(spectrogram.values, spectrogram.step_seconds, cfg.step_s, axis=2), cfg.step_s)

    volumes = downsample_spatial(log_scale(fmri, cfg.log_offset), cfg.downsample_factor)
    volumes = FMRIVolumeSeries(resample_time(volumes.volumes, volumes.tr_seconds, cfg.step_s, axis=0),
                               cfg.step_s, log_scaled=True)
    return partition_windows(spectrogram, volumes, cfg.window_s, cfg.shift_s)
