"""Synthetic paired-modality recordings, dataset I/O and prediction helpers.

A recording is a night of per-epoch stage labels drawn from a Markov chain,
rendered to two simultaneously "recorded" channels. Each stage excites a
set of sinusoidal bands whose per-epoch amplitudes, phases and a pink-noise
bed are shared between the channels (the same underlying activity); the
source channel adds its own sensor noise, while the target channel first
passes the activity through a gain and a high-frequency tilt and then adds
stronger independent noise. The tilt plus the lower signal-to-noise ratio
is what creates the channel mismatch: the static spectral shaping itself
is removed by per-bin normalization, but bands that sink under the target
noise floor lose their discriminative range.

Disk layout per recording: ``rec_<k>/{meta.json, source.f32, target.f32,
labels.u8}`` with little-endian float32 sample rows and one stage byte per
epoch (0..4 = W, N1, N2, N3, REM).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataFormatError
from .preproc import EPOCH_SAMPLES, N_STAGES, TARGET_FS


def _default_transition() -> np.ndarray:
    return np.array([
        [0.70, 0.20, 0.07, 0.01, 0.02],   # W
        [0.10, 0.40, 0.40, 0.04, 0.06],   # N1
        [0.03, 0.06, 0.66, 0.17, 0.08],   # N2
        [0.01, 0.02, 0.27, 0.68, 0.02],   # N3
        [0.05, 0.10, 0.15, 0.02, 0.68],   # REM
    ])


@dataclass
class StageMarkov:
    transition: np.ndarray = field(default_factory=_default_transition)
    initial: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0, 0]))
    epochs_per_recording: int = 48

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        if self.transition.shape != (N_STAGES, N_STAGES) or self.initial.shape != (N_STAGES,):
            raise ContractError("stage chain needs a 5x5 transition matrix and a 5-vector initial")
        if np.any(self.transition < 0) or np.any(self.initial < 0):
            raise ContractError("stage chain probabilities must be nonnegative")
        if np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-9):
            raise ContractError("transition matrix rows must sum to 1")
        if abs(self.initial.sum() - 1.0) > 1e-9:
            raise ContractError("initial distribution must sum to 1")

    def sample(self, n_epochs: int, rng: np.random.Generator) -> np.ndarray:
        labels = np.empty(n_epochs, dtype=np.uint8)
        state = rng.choice(N_STAGES, p=self.initial)
        for i in range(n_epochs):
            labels[i] = state
            state = rng.choice(N_STAGES, p=self.transition[state])
        return labels


# band centers in Hz: delta, theta, alpha, sigma, beta
DEFAULT_BAND_FREQS = np.array([1.5, 5.0, 10.0, 13.5, 22.0])

# per-stage band amplitudes of the source channel; rows W, N1, N2, N3, REM
DEFAULT_STAGE_AMPS = np.array([
    [0.20, 0.20, 1.40, 0.25, 0.70],   # W: alpha + beta
    [0.40, 1.10, 0.35, 0.20, 0.15],   # N1: theta
    [0.70, 0.30, 0.20, 1.30, 0.15],   # N2: sigma spindles + some delta
    [2.00, 0.40, 0.15, 0.20, 0.10],   # N3: delta
    [0.30, 0.85, 0.25, 0.15, 0.80],   # REM: theta + beta
])

# how the target electrode sees the same activity: each stage keeps a
# distinct signature but the band emphasis differs strongly from the
# source channel, so a source-trained classifier misreads the layout
DEFAULT_TARGET_STAGE_AMPS = np.array([
    [0.30, 0.90, 0.50, 0.20, 0.30],   # W: theta-leaning
    [0.40, 0.30, 1.00, 0.20, 0.30],   # N1: alpha-leaning
    [1.40, 0.40, 0.20, 0.45, 0.15],   # N2: delta-heavy
    [0.80, 0.35, 0.15, 1.10, 0.15],   # N3: sigma-heavy
    [0.35, 0.45, 0.30, 0.20, 0.90],   # REM: beta-heavy
])


@dataclass
class ModalityEmitter:
    """Renders stage labels to paired source/target signals at 100 Hz.

    Both channels share the per-epoch band activities, phases and the pink
    bed (the same underlying physiology); ``target_stage_amps`` remixes how
    strongly each band shows up per stage in the target electrode, and the
    gain / tilt / soft-clip / independent-noise chain models the wearable
    signal path.
    """

    band_freqs: np.ndarray = field(default_factory=lambda: DEFAULT_BAND_FREQS.copy())
    stage_amps: np.ndarray = field(default_factory=lambda: DEFAULT_STAGE_AMPS.copy())
    target_stage_amps: np.ndarray | None = None   # None: same profile as source
    target_band_freqs: np.ndarray | None = None   # None: same band centers as source
    sigma: float = 1.0                 # sensor-noise level knob
    source_noise_scale: float = 0.35
    target_noise_scale: float = 0.70
    target_gain: float = 0.5
    target_tilt_hz: float | None = 6.0
    target_clip: float | None = None   # soft-clip scale; None disables the distortion
    shared_pink: float = 0.30          # pink noise common to both channels
    recording_jitter: float = 0.30     # sd of per-recording log band gains
    epoch_jitter: float = 0.25         # sd of per-epoch log amplitude jitter

    def __post_init__(self):
        self.band_freqs = np.asarray(self.band_freqs, dtype=np.float64)
        self.stage_amps = np.asarray(self.stage_amps, dtype=np.float64)
        if self.stage_amps.shape != (N_STAGES, len(self.band_freqs)):
            raise ContractError("stage_amps must be (5, n_bands)")
        if self.target_stage_amps is not None:
            self.target_stage_amps = np.asarray(self.target_stage_amps, dtype=np.float64)
            if self.target_stage_amps.shape != self.stage_amps.shape:
                raise ContractError("target_stage_amps must match stage_amps shape")
        if self.target_band_freqs is not None:
            self.target_band_freqs = np.asarray(self.target_band_freqs, dtype=np.float64)
            if self.target_band_freqs.shape != self.band_freqs.shape:
                raise ContractError("target_band_freqs must match band_freqs shape")
        if self.sigma < 0:
            raise ContractError(f"noise level sigma must be >= 0, got {self.sigma}")

    @classmethod
    def default_mismatch(cls, sigma: float = 1.0) -> "ModalityEmitter":
        """The stock benchmark emitter with the full channel mismatch."""
        return cls(target_stage_amps=DEFAULT_TARGET_STAGE_AMPS.copy(), sigma=sigma)

    def emit(self, labels: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        n_epochs = len(labels)
        n = n_epochs * EPOCH_SAMPLES
        t = np.arange(EPOCH_SAMPLES) / TARGET_FS
        n_bands = len(self.band_freqs)
        tgt_amps = self.stage_amps if self.target_stage_amps is None else self.target_stage_amps
        tgt_freqs = self.band_freqs if self.target_band_freqs is None else self.target_band_freqs

        rec_gain = np.exp(rng.normal(0.0, self.recording_jitter, size=n_bands))
        src_wave = np.empty(n, dtype=np.float64)
        tgt_wave = np.empty(n, dtype=np.float64)
        for e, stage in enumerate(labels):
            activity = rec_gain * np.exp(rng.normal(0.0, self.epoch_jitter, size=n_bands))
            phases = rng.uniform(0.0, 2.0 * np.pi, size=n_bands)
            bands = np.sin(2.0 * np.pi * self.band_freqs[:, None] * t[None, :] + phases[:, None])
            lo, hi = e * EPOCH_SAMPLES, (e + 1) * EPOCH_SAMPLES
            src_wave[lo:hi] = (self.stage_amps[stage] * activity) @ bands
            if self.target_band_freqs is None:
                tgt_bands = bands
            else:
                tgt_bands = np.sin(2.0 * np.pi * tgt_freqs[:, None] * t[None, :] + phases[:, None])
            tgt_wave[lo:hi] = (tgt_amps[stage] * activity) @ tgt_bands
        bed = self.shared_pink * _pink_noise(n, rng)
        src_wave += bed
        tgt_wave += bed

        source = src_wave + self.sigma * self.source_noise_scale * _pink_noise(n, rng)
        shaped = tgt_wave
        if self.target_clip is not None:
            shaped = self.target_clip * np.tanh(shaped / self.target_clip)
        shaped = self.target_gain * _tilt(shaped, self.target_tilt_hz)
        target = shaped + self.sigma * self.target_noise_scale * _pink_noise(n, rng)
        return source.astype(np.float32), target.astype(np.float32)


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """1/f-amplitude noise, normalized to unit standard deviation."""
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / TARGET_FS)
    scale = 1.0 / np.sqrt(np.maximum(freqs, freqs[1] if n > 1 else 1.0))
    scale[0] = 0.0
    pink = np.fft.irfft(spectrum * scale, n=n)
    std = pink.std()
    return pink / std if std > 0 else pink


def _tilt(x: np.ndarray, corner_hz: float | None) -> np.ndarray:
    """First-order high-frequency roll-off (6 dB per octave above the corner)."""
    if corner_hz is None:
        return x
    spectrum = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), d=1.0 / TARGET_FS)
    spectrum *= 1.0 / (1.0 + freqs / corner_hz)
    return np.fft.irfft(spectrum, n=len(x))


@dataclass
class PairedRecording:
    rec_id: int
    source: np.ndarray          # float32 samples at 100 Hz
    target: np.ndarray
    labels: np.ndarray          # uint8 per epoch
    fs: int = TARGET_FS
    seed: int | None = None

    @property
    def n_epochs(self) -> int:
        return len(self.labels)


@dataclass
class PairedDataset:
    recordings: list[PairedRecording]

    def __len__(self):
        return len(self.recordings)


def generate_dataset(markov: StageMarkov, emitter: ModalityEmitter,
                     n_recordings: int, seed: int) -> PairedDataset:
    """Deterministic synthetic dataset: one independent RNG stream per recording."""
    if n_recordings < 1:
        raise ContractError("n_recordings must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_recordings)
    recordings = []
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        labels = markov.sample(markov.epochs_per_recording, rng)
        source, target = emitter.emit(labels, rng)
        recordings.append(PairedRecording(rec_id=k, source=source, target=target,
                                          labels=labels, seed=seed))
    return PairedDataset(recordings)


# ---------------------------------------------------------------------------
# disk format


def save_dataset(ds: PairedDataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for rec in ds.recordings:
        d = root / f"rec_{rec.rec_id:03d}"
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "channels": ["source", "target"],
            "fs": {"source": rec.fs, "target": rec.fs},
            "n_epochs": int(rec.n_epochs),
            "seed": rec.seed,
        }
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        (d / "source.f32").write_bytes(np.asarray(rec.source, dtype="<f4").tobytes())
        (d / "target.f32").write_bytes(np.asarray(rec.target, dtype="<f4").tobytes())
        (d / "labels.u8").write_bytes(np.asarray(rec.labels, dtype=np.uint8).tobytes())


def _load_channel(path: Path, expected_samples: int) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) != 4 * expected_samples:
        raise DataFormatError(
            f"{path}: expected {4 * expected_samples} bytes, file ends at offset {len(blob)}")
    return np.frombuffer(blob, dtype="<f4").astype(np.float32)


def load_dataset(root) -> PairedDataset:
    root = Path(root)
    rec_dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("rec_"))
    if not rec_dirs:
        raise DataFormatError(f"{root}: no rec_* directories found")
    recordings = []
    for d in rec_dirs:
        meta_path = d / "meta.json"
        try:
            meta = json.loads(meta_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{meta_path}: unreadable meta ({exc})") from exc
        n_epochs = int(meta["n_epochs"])
        fs = int(meta["fs"]["source"])
        labels_blob = (d / "labels.u8").read_bytes()
        if len(labels_blob) != n_epochs:
            raise DataFormatError(
                f"{d / 'labels.u8'}: {len(labels_blob)} labels but meta declares {n_epochs} epochs")
        labels = np.frombuffer(labels_blob, dtype=np.uint8)
        if labels.size and labels.max() >= N_STAGES:
            raise DataFormatError(f"{d / 'labels.u8'}: stage byte out of range 0..4")
        expected = n_epochs * 30 * fs
        source = _load_channel(d / "source.f32", expected)
        target = _load_channel(d / "target.f32", expected)
        recordings.append(PairedRecording(
            rec_id=int(d.name.split("_")[1]), source=source, target=target,
            labels=labels.copy(), fs=fs, seed=meta.get("seed")))
    return PairedDataset(recordings)


# ---------------------------------------------------------------------------
# sequence sampling and ensemble aggregation


def sample_sequences(n_epochs: int, seq_len: int, shift: int = 1) -> list[int]:
    """Start indices of the sliding windows covering a recording."""
    if n_epochs < seq_len:
        raise ContractError(f"recording has {n_epochs} epochs, need at least {seq_len}")
    return list(range(0, n_epochs - seq_len + 1, shift))


def aggregate_ensemble(window_posteriors: list[tuple[int, np.ndarray]],
                       n_epochs: int) -> tuple[np.ndarray, np.ndarray]:
    """Combine overlapping window predictions by summing log posteriors.

    ``window_posteriors`` holds (start index, (seq_len, 5) posterior block)
    pairs. Returns per-epoch labels (argmax, ties to the lowest stage) and
    the renormalized aggregate posterior.
    """
    log_sum = np.zeros((n_epochs, N_STAGES), dtype=np.float64)
    counts = np.zeros(n_epochs, dtype=np.int64)
    for start, block in window_posteriors:
        block = np.asarray(block, dtype=np.float64)
        span = block.shape[0]
        if start < 0 or start + span > n_epochs:
            raise ContractError(f"window [{start}, {start + span}) outside {n_epochs} epochs")
        log_sum[start: start + span] += np.log(block + 1e-12)
        counts[start: start + span] += 1
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ContractError(f"epoch {missing} received no prediction")
    labels = np.argmax(log_sum, axis=1).astype(np.uint8)
    shifted = log_sum - log_sum.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return labels, probs


def split_subsets(rec_ids: list[int], rng: np.random.Generator) -> dict[int, list[list[int]]]:
    """Partition 10 training recordings into the protocol's nested subsets.

    Returns {10: one subset, 5: two disjoint halves, 2: five disjoint pairs};
    the assignment is a seeded permutation.
    """
    if len(rec_ids) != 10:
        raise ContractError(f"subset protocol needs exactly 10 recordings, got {len(rec_ids)}")
    ids = np.asarray(rec_ids)
    perm = ids[rng.permutation(len(ids))]
    return {
        10: [sorted(int(i) for i in perm)],
        5: [sorted(int(i) for i in perm[:5]), sorted(int(i) for i in perm[5:])],
        2: [sorted(int(i) for i in perm[2 * k: 2 * k + 2]) for k in range(5)],
    }
