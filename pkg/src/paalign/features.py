"""Differential-entropy features from band-filtered single-channel signals."""
from __future__ import annotations

import json
import math
from typing import Sequence, Tuple

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .data import DataError

DEFAULT_FS = 200.0
# Delta, Theta, Alpha, Beta, Gamma
DEFAULT_BANDS: Tuple[Tuple[float, float], ...] = (
    (1.0, 3.0),
    (4.0, 7.0),
    (8.0, 13.0),
    (14.0, 30.0),
    (31.0, 50.0),
)
VARIANCE_FLOOR = 1e-12


def extract_de(
    signal: np.ndarray,
    fs: float,
    bands: Sequence[Tuple[float, float]] = DEFAULT_BANDS,
    window_s: float = 1.0,
) -> np.ndarray:
    """Per-window, per-band differential entropy of a 1-D signal.

    Each band is isolated with a 4th-order forward-backward Butterworth
    band-pass over the whole signal; the signal is then cut into
    non-overlapping windows (trailing remainder dropped) and each window
    contributes DE = 0.5*ln(2*pi*e*var), variance floored at 1e-12.
    Rows are windows, columns bands.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise DataError(f"signal must be 1-D, got shape {signal.shape}")
    if not bands:
        raise DataError("at least one band required")
    if fs <= 0:
        raise DataError(f"sampling rate must be positive, got {fs}")
    for lo, hi in bands:
        if not 0.0 < lo < hi:
            raise DataError(f"band ({lo}, {hi}) must satisfy 0 < lo < hi")
        if fs <= 2.0 * hi:
            raise DataError(
                f"band ({lo}, {hi}) exceeds the Nyquist limit at fs={fs}"
            )
    width = window_s * fs
    if abs(width - round(width)) > 1e-9:
        raise DataError(
            f"window of {window_s}s is not a whole number of samples at fs={fs}"
        )
    width = int(round(width))
    if width < 8:
        raise DataError(f"window must cover >= 8 samples, got {width}")

    n_windows = signal.size // width
    out = np.empty((n_windows, len(bands)), dtype=np.float64)
    if n_windows == 0:
        return out
    trimmed_len = n_windows * width
    for b, (lo, hi) in enumerate(bands):
        sos = butter(4, (lo, hi), btype="bandpass", fs=fs, output="sos")
        filtered = sosfiltfilt(sos, signal)
        var = filtered[:trimmed_len].reshape(n_windows, width).var(axis=1)
        np.maximum(var, VARIANCE_FLOOR, out=var)
        out[:, b] = 0.5 * np.log(2.0 * math.pi * math.e * var)
    return out


def load_signal(raw_path: str, sidecar_path: str) -> Tuple[np.ndarray, float, str]:
    """Raw float32 little-endian stream plus its JSON sidecar {fs, channel_name}."""
    try:
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read sidecar {sidecar_path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"sidecar {sidecar_path!r} is not valid JSON: {exc}") from exc
    if "fs" not in meta:
        raise DataError(f"sidecar {sidecar_path!r} missing 'fs'")
    try:
        with open(raw_path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read signal {raw_path!r}: {exc}") from exc
    signal = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return signal, float(meta["fs"]), str(meta.get("channel_name", ""))
