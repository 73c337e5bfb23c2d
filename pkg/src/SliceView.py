import logging
import os
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg as FigureCanvas
from matplotlib.figure import Figure

from src.Errors import FormatError, IndexOutOfRange

logger = logging.getLogger(__name__)

# Gray level used when a slice has no contrast.
FLAT_GRAY = 128


def normalize_slice(plane: np.ndarray) -> np.ndarray:
    # Min-max scaling to 0..255; a constant plane becomes uniform mid-gray.
    plane = np.asarray(plane, dtype=np.float64)
    low, high = plane.min(), plane.max()
    if high == low:
        return np.full(plane.shape, FLAT_GRAY, dtype=np.uint8)
    return np.rint((plane - low) / (high - low) * 255.0).astype(np.uint8)


def axial_slice(volume: np.ndarray, z_index: int) -> np.ndarray:
    # [x, y, z] -> image rows along y, columns along x.
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"expected an [x, y, z] volume, got {volume.shape}")
    if not 0 <= z_index < volume.shape[2]:
        raise IndexOutOfRange(f"z index {z_index} outside 0..{volume.shape[2] - 1}")
    return volume[:, :, z_index].T


def write_pgm(path: str, pixels: np.ndarray) -> str:
    # Binary portable graymap (P5), 8 bits per pixel.
    pixels = np.asarray(pixels, dtype=np.uint8)
    height, width = pixels.shape
    with open(path, "wb") as handle:
        handle.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        handle.write(pixels.tobytes())
    return path


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        data = handle.read()
    tokens: List[bytes] = []
    offset = 0
    while len(tokens) < 4:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        if offset < len(data) and data[offset:offset + 1] == b"#":
            while offset < len(data) and data[offset:offset + 1] != b"\n":
                offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FormatError(path, offset, "truncated PGM header")
        tokens.append(data[start:offset])
    if tokens[0] != b"P5":
        raise FormatError(path, 0, "not a binary PGM")
    try:
        width, height, depth = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(path, offset, "non-numeric PGM header") from exc
    if depth != 255:
        raise FormatError(path, offset, f"unsupported max value {depth}")
    offset += 1
    pixels = data[offset:]
    if len(pixels) != width * height:
        raise FormatError(path, offset, f"expected {width * height} pixels, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()


def emit_slice(volume: np.ndarray, z_index: int, path: str) -> str:
    return write_pgm(path, normalize_slice(axial_slice(volume, z_index)))


def emit_window_slices(window: np.ndarray, directory: str, prefix: str,
                       z_index: Optional[int] = None) -> List[str]:
    # One PGM per timestep of a [T, X, Y, Z] window at a fixed axial index.
    window = np.asarray(window)
    z = window.shape[3] // 2 if z_index is None else z_index
    os.makedirs(directory, exist_ok=True)
    paths = [emit_slice(volume, z, os.path.join(directory, f"{prefix}_t{t:02d}_z{z:02d}.pgm"))
             for t, volume in enumerate(window)]
    logger.debug("wrote %d slices for %s", len(paths), prefix)
    return paths


def create_slice_panel(ax, plane: np.ndarray, title: str, limits: Tuple[float, float]):
    ax.imshow(plane, cmap="gray", vmin=limits[0], vmax=limits[1], origin="lower",
              interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])


def render_comparison(real: np.ndarray, synthesized: Mapping[str, np.ndarray], path: str,
                      timestep: int = 0, z_index: Optional[int] = None) -> str:
    # Real window next to each variant's synthesis, one axial slice at one timestep.
    real = np.asarray(real)
    if not 0 <= timestep < real.shape[0]:
        raise IndexOutOfRange(f"timestep {timestep} outside 0..{real.shape[0] - 1}")
    z = real.shape[3] // 2 if z_index is None else z_index
    planes: Dict[str, np.ndarray] = {"real": axial_slice(real[timestep], z)}
    for name, window in synthesized.items():
        planes[name] = axial_slice(np.asarray(window)[timestep], z)
    low = min(p.min() for p in planes.values())
    high = max(p.max() for p in planes.values())

    figure = Figure(figsize=(2.5 * len(planes), 2.8))
    FigureCanvas(figure)
    axes = figure.subplots(1, len(planes), squeeze=False)[0]
    for ax, (name, plane) in zip(axes, planes.items()):
        create_slice_panel(ax, plane, name, (low, high))
    figure.suptitle(f"z={z}, t={timestep}")
    figure.savefig(path, dpi=100)
    logger.info("wrote comparison panel %s", path)
    return path
