"""Raw signal to normalized log-spectrogram epochs.

The fixed pipeline is: zero-phase band-pass 0.3-40 Hz, resample to 100 Hz,
split into 30 s epochs, short-time Fourier transform with a 2 s Hamming
window at 50% overlap and a 256-point FFT (29 frames x 129 bins per epoch),
log amplitude with a 1e-12 floor, then per-recording normalization of every
frequency bin to zero mean and unit standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .errors import ContractError, DimensionError, DomainError

TARGET_FS = 100
EPOCH_SECONDS = 30
EPOCH_SAMPLES = TARGET_FS * EPOCH_SECONDS
WINDOW_SAMPLES = 2 * TARGET_FS
HOP_SAMPLES = WINDOW_SAMPLES // 2
NFFT = 256
N_FRAMES = (EPOCH_SAMPLES - WINDOW_SAMPLES) // HOP_SAMPLES + 1   # 29
N_BINS = NFFT // 2 + 1                                           # 129
LOG_FLOOR = 1e-12
BAND_LO = 0.3
BAND_HI = 40.0

STAGE_NAMES = ("W", "N1", "N2", "N3", "REM")
N_STAGES = len(STAGE_NAMES)


@dataclass
class RawChannel:
    samples: np.ndarray
    fs: int
    modality: str = "source"


@dataclass
class EpochTensor:
    frames: np.ndarray          # (N_FRAMES, N_BINS) float32
    epoch_index: int
    label: int


def bandpass(x: RawChannel, lo: float = BAND_LO, hi: float = BAND_HI) -> RawChannel:
    """Zero-phase band-pass: order-4 Butterworth applied forward and backward."""
    nyquist = x.fs / 2.0
    if not (0.0 < lo < hi):
        raise DomainError(f"bandpass needs 0 < lo < hi, got lo={lo}, hi={hi}")
    if hi >= nyquist:
        raise DomainError(f"bandpass hi={hi} Hz must stay below Nyquist {nyquist} Hz")
    sos = sps.butter(4, [lo, hi], btype="bandpass", fs=x.fs, output="sos")
    filtered = sps.sosfiltfilt(sos, np.asarray(x.samples, dtype=np.float64))
    return RawChannel(samples=filtered, fs=x.fs, modality=x.modality)


def resample(x: RawChannel, fs_out: int = TARGET_FS) -> RawChannel:
    """Polyphase resampling to a lower rate; output length round(n * fs_out / fs_in)."""
    if fs_out > x.fs:
        raise ContractError(f"upsampling {x.fs} -> {fs_out} Hz is not supported")
    if fs_out == x.fs:
        return RawChannel(np.asarray(x.samples, dtype=np.float64), x.fs, x.modality)
    ratio = Fraction(int(fs_out), int(x.fs))
    y = sps.resample_poly(np.asarray(x.samples, dtype=np.float64), ratio.numerator, ratio.denominator)
    n_out = int(round(len(x.samples) * fs_out / x.fs))
    if len(y) > n_out:
        y = y[:n_out]
    elif len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return RawChannel(samples=y, fs=fs_out, modality=x.modality)


def log_spectrogram(epoch: np.ndarray) -> np.ndarray:
    """Log-amplitude STFT of one 30 s epoch at 100 Hz, shape (29, 129)."""
    epoch = np.asarray(epoch, dtype=np.float64)
    if epoch.shape != (EPOCH_SAMPLES,):
        raise DimensionError(f"log_spectrogram expects {EPOCH_SAMPLES} samples, got shape {epoch.shape}")
    window = np.hamming(WINDOW_SAMPLES)
    frames = np.lib.stride_tricks.sliding_window_view(epoch, WINDOW_SAMPLES)[::HOP_SAMPLES]
    amplitude = np.abs(np.fft.rfft(frames * window, n=NFFT, axis=1))
    return np.log(amplitude + LOG_FLOOR).astype(np.float32)


def normalize_recording(epochs: list[EpochTensor]) -> list[EpochTensor]:
    """Zero mean / unit std per frequency bin over all frames of the recording.

    Bins whose std falls below 1e-8 are mapped to zero instead of dividing
    by a degenerate scale.
    """
    if not epochs:
        raise ContractError("normalize_recording needs at least one epoch")
    stacked = np.concatenate([e.frames for e in epochs], axis=0).astype(np.float64)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    degenerate = std < 1e-8
    safe_std = np.where(degenerate, 1.0, std)
    out = []
    for e in epochs:
        frames = (e.frames.astype(np.float64) - mean) / safe_std
        frames[:, degenerate] = 0.0
        out.append(EpochTensor(frames=frames.astype(np.float32), epoch_index=e.epoch_index, label=e.label))
    return out


def split_epochs(x: RawChannel) -> np.ndarray:
    """Trim the tail and return (n_epochs, EPOCH_SAMPLES)."""
    if x.fs != TARGET_FS:
        raise ContractError(f"split_epochs expects {TARGET_FS} Hz input, got {x.fs}")
    n_epochs = len(x.samples) // EPOCH_SAMPLES
    if n_epochs == 0:
        raise ContractError("recording shorter than one epoch")
    return np.asarray(x.samples[: n_epochs * EPOCH_SAMPLES], dtype=np.float64).reshape(n_epochs, EPOCH_SAMPLES)


def preprocess_channel(x: RawChannel, labels: np.ndarray) -> list[EpochTensor]:
    """Full pipeline from a raw channel to normalized epoch tensors."""
    filtered = bandpass(x)
    resampled = resample(filtered)
    matrix = split_epochs(resampled)
    if len(labels) < matrix.shape[0]:
        raise ContractError(f"{matrix.shape[0]} epochs but only {len(labels)} labels")
    epochs = [
        EpochTensor(frames=log_spectrogram(matrix[i]), epoch_index=i, label=int(labels[i]))
        for i in range(matrix.shape[0])
    ]
    return normalize_recording(epochs)
