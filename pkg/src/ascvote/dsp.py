"""Audio front end: constant-Q spectrograms, resizing, and fixed-size patch extraction.

Every audio segment is turned into one log-magnitude constant-Q spectrogram per
channel, resized to 143x832, and cut into ten 143x143 patches with a stride of
80 columns (the last patch is right-aligned so that exactly ten patches always
come out). All functions here are pure and deterministic.
"""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .validation import as_float_array

PATCH_SIZE = 143
TARGET_WIDTH = 832
PATCH_STRIDE = 80
PATCHES_PER_SPECTROGRAM = 10

# Linear magnitudes below this value are treated as silence before the dB
# conversion, so log10 never sees zero.
MAGNITUDE_EPSILON = 1e-10

_WINDOWS = {
    "hann": np.hanning,
    "hamming": np.hamming,
    "rect": np.ones,
}


@dataclass(frozen=True)
class CQTParams:
    """Constant-Q transform settings.

    Center frequencies are geometrically spaced, ``f_min * 2**(k / bins_per_octave)``,
    and each bin analyses the signal through a window of ``ceil(Q * fs / f_k)``
    samples where ``Q = 1 / (2**(1/bins_per_octave) - 1)``. The defaults put the
    frequency axis natively at 143 bins so the height resize is a no-op.
    """

    f_min: float = 27.5
    bins_per_octave: int = 24
    n_bins: int = 143
    hop_seconds: float = 0.011
    window_kind: str = "hann"
    magnitude_floor_db: float = -80.0

    def __post_init__(self):
        if self.f_min <= 0:
            raise ValueError("f_min must be positive")
        if self.bins_per_octave < 1:
            raise ValueError("bins_per_octave must be a positive integer")
        if self.n_bins < self.bins_per_octave:
            raise ValueError("n_bins must be at least bins_per_octave")
        if self.hop_seconds <= 0:
            raise ValueError("hop_seconds must be positive")
        if self.window_kind not in _WINDOWS:
            raise ValueError(f"unknown window_kind {self.window_kind!r}; choose from {sorted(_WINDOWS)}")
        if not math.isfinite(self.magnitude_floor_db):
            raise ValueError("magnitude_floor_db must be finite")

    @property
    def quality_factor(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def bin_frequency(self, k: int) -> float:
        """Center frequency of bin ``k`` in Hz."""
        return self.f_min * 2.0 ** (k / self.bins_per_octave)

    @property
    def max_frequency(self) -> float:
        return self.bin_frequency(self.n_bins - 1)


@dataclass(frozen=True)
class AudioSegment:
    """A multi-channel audio segment with amplitudes in [-1, 1]."""

    samples: tuple[np.ndarray, ...]
    sample_rate: float
    segment_id: str = ""

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("segment needs at least one channel")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        lengths = {ch.shape for ch in self.samples}
        if len(lengths) != 1:
            raise ValueError("all channels must have the same length")
        for ch in self.samples:
            if ch.ndim != 1 or ch.size == 0:
                raise ValueError("each channel must be a non-empty 1-d array")
            peak = float(np.max(np.abs(ch)))
            if peak > 1.0 + 1e-9:
                raise ValueError(f"amplitudes must lie in [-1, 1], found peak {peak:.6g}")

    @property
    def channel_count(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return self.samples[0].size / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Log-magnitude time-frequency matrix (rows = frequency bins, columns = frames)."""

    values: np.ndarray
    segment_id: str = ""
    channel_index: int = 0

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise ValueError("spectrogram values must be a non-empty 2-d array")
        if not np.all(np.isfinite(v)):
            raise ValueError("spectrogram values must be finite")

    @property
    def freq_bins(self) -> int:
        return self.values.shape[0]

    @property
    def time_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Patch:
    """A 143x143 spectrogram excerpt, identified by segment, channel and position."""

    values: np.ndarray
    segment_id: str = ""
    channel_index: int = 0
    patch_index: int = 0

    def __post_init__(self):
        if self.values.shape != (PATCH_SIZE, PATCH_SIZE):
            raise ValueError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {self.values.shape}")
        if not 0 <= self.patch_index < PATCHES_PER_SPECTROGRAM:
            raise ValueError(f"patch_index must lie in [0, {PATCHES_PER_SPECTROGRAM})")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.segment_id, self.channel_index, self.patch_index)


def compute_cqt(
    samples,
    sample_rate: float,
    params: CQTParams | None = None,
    *,
    segment_id: str = "",
    channel_index: int = 0,
) -> Spectrogram:
    """Constant-Q spectrogram of a single channel.

    For each bin ``k`` the signal is correlated, frame by frame, with a windowed
    complex exponential at the bin's center frequency; the window length scales
    inversely with frequency so the frequency-to-bandwidth ratio stays constant.
    Magnitudes are normalised by the window sum and converted to dB with a floor.

    Output has ``params.n_bins`` rows and ``floor(duration / hop_seconds) + 1``
    columns.
    """
    p = params if params is not None else CQTParams()
    x = as_float_array(samples, "samples", ndim=1)
    if x.size == 0:
        raise ValueError("cannot transform an empty signal")
    if sample_rate <= 0:
        raise ValueError("sample_rate must be positive")
    if p.max_frequency >= sample_rate / 2.0:
        raise ValueError(
            f"highest analysis frequency {p.max_frequency:.2f} Hz exceeds the Nyquist "
            f"limit {sample_rate / 2.0:.2f} Hz; lower n_bins or f_min, or resample"
        )

    duration = x.size / sample_rate
    n_frames = int(math.floor(duration / p.hop_seconds + 1e-9)) + 1
    q = p.quality_factor
    window_fn = _WINDOWS[p.window_kind]

    centers = np.rint(np.arange(n_frames) * p.hop_seconds * sample_rate).astype(np.int64)
    n_max = max(int(math.ceil(q * sample_rate / p.f_min)), 1)
    pad = n_max // 2 + 1
    padded = np.zeros(x.size + 2 * pad, dtype=np.float64)
    padded[pad : pad + x.size] = x

    magnitude = np.empty((p.n_bins, n_frames), dtype=np.float64)
    for k in range(p.n_bins):
        f_k = p.bin_frequency(k)
        n_k = max(int(math.ceil(q * sample_rate / f_k)), 1)
        w = window_fn(n_k)
        w_sum = float(w.sum())
        if w_sum <= 0.0:
            w_sum = float(n_k)
        offsets = np.arange(n_k)
        phase = -2j * np.pi * f_k * (offsets - (n_k - 1) / 2.0) / sample_rate
        kernel = (w * np.exp(phase)) / w_sum
        starts = centers - n_k // 2 + pad
        # chunk the frame gather so the temporary matrix stays small
        chunk = max(1, 4_000_000 // n_k)
        for lo in range(0, n_frames, chunk):
            hi = min(lo + chunk, n_frames)
            frames = padded[starts[lo:hi, None] + offsets[None, :]]
            magnitude[k, lo:hi] = np.abs(frames @ kernel)

    db = 20.0 * np.log10(np.maximum(magnitude, MAGNITUDE_EPSILON))
    values = np.maximum(db, p.magnitude_floor_db)
    return Spectrogram(values=values, segment_id=segment_id, channel_index=channel_index)


def resize_spectrogram(
    spec: Spectrogram, target_w: int = TARGET_WIDTH, target_h: int = PATCH_SIZE
) -> Spectrogram:
    """Resize to ``target_h`` rows x ``target_w`` columns by bilinear interpolation.

    Sample positions map the source corners onto the target corners, so a
    source that already has the target size comes back unchanged. Degenerate
    single-row or single-column sources collapse to nearest-neighbour lookups.
    """
    if target_w < 1 or target_h < 1:
        raise ValueError("target dimensions must be positive")
    src = spec.values
    rows = np.linspace(0.0, src.shape[0] - 1.0, target_h)
    cols = np.linspace(0.0, src.shape[1] - 1.0, target_w)

    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r1 = np.minimum(r0 + 1, src.shape[0] - 1)
    c1 = np.minimum(c0 + 1, src.shape[1] - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]

    top = src[np.ix_(r0, c0)] * (1.0 - fc) + src[np.ix_(r0, c1)] * fc
    bottom = src[np.ix_(r1, c0)] * (1.0 - fc) + src[np.ix_(r1, c1)] * fc
    out = top * (1.0 - fr) + bottom * fr
    return Spectrogram(values=out, segment_id=spec.segment_id, channel_index=spec.channel_index)


def patch_start_columns(width: int = TARGET_WIDTH) -> list[int]:
    """Start columns of the patches cut from a spectrogram of the given width.

    Full strides of ``PATCH_STRIDE`` are taken first; if they do not cover the
    right edge, one extra right-aligned patch is appended.
    """
    if width < PATCH_SIZE:
        raise ValueError(f"width must be at least {PATCH_SIZE}")
    n_full = (width - PATCH_SIZE) // PATCH_STRIDE + 1
    starts = [i * PATCH_STRIDE for i in range(n_full)]
    last = width - PATCH_SIZE
    if starts[-1] != last:
        starts.append(last)
    return starts


def extract_patches(spec: Spectrogram) -> list[Patch]:
    """Cut a resized 143x832 spectrogram into its ten 143x143 patches."""
    if spec.values.shape != (PATCH_SIZE, TARGET_WIDTH):
        raise ValueError(
            f"expected a {PATCH_SIZE}x{TARGET_WIDTH} spectrogram, got {spec.values.shape}"
        )
    starts = patch_start_columns(TARGET_WIDTH)
    assert len(starts) == PATCHES_PER_SPECTROGRAM
    return [
        Patch(
            values=spec.values[:, s : s + PATCH_SIZE].copy(),
            segment_id=spec.segment_id,
            channel_index=spec.channel_index,
            patch_index=i,
        )
        for i, s in enumerate(starts)
    ]


def prepare_segment(segment: AudioSegment, params: CQTParams | None = None) -> list[Patch]:
    """Full front end for one segment: CQT per channel, resize, patch.

    Channels are transformed independently, so a segment with N channels yields
    N * 10 patches, ordered by (channel_index, patch_index).
    """
    patches: list[Patch] = []
    for ch, channel_samples in enumerate(segment.samples):
        spec = compute_cqt(
            channel_samples,
            segment.sample_rate,
            params,
            segment_id=segment.segment_id,
            channel_index=ch,
        )
        patches.extend(extract_patches(resize_spectrogram(spec)))
    return patches


def synthesize_tone(
    frequency: float,
    duration: float,
    sample_rate: float,
    *,
    amplitude: float = 0.5,
    channel_count: int = 1,
    segment_id: str = "tone",
    noise: float = 0.0,
    seed: int = 0,
) -> AudioSegment:
    """Generate a sinusoid segment, optionally with additive seeded noise.

    All channels carry identical samples.
    """
    if not 0.0 < amplitude <= 1.0:
        raise ValueError("amplitude must lie in (0, 1]")
    if noise < 0.0 or amplitude + noise > 1.0:
        raise ValueError("amplitude + noise must not exceed 1")
    n = int(round(duration * sample_rate))
    if n < 1:
        raise ValueError("duration too short for the sample rate")
    t = np.arange(n) / sample_rate
    x = amplitude * np.sin(2.0 * np.pi * frequency * t)
    if noise > 0.0:
        rng = np.random.default_rng(seed)
        x = x + noise * rng.uniform(-1.0, 1.0, size=n)
    x = np.clip(x, -1.0, 1.0)
    return AudioSegment(
        samples=tuple(x.copy() for _ in range(channel_count)),
        sample_rate=sample_rate,
        segment_id=segment_id,
    )


def read_wav(path, segment_id: str | None = None) -> AudioSegment:
    """Read an uncompressed PCM wave file (16-bit or 24-bit, any channel count)."""
    path = Path(path)
    with wave.open(str(path), "rb") as f:
        n_channels = f.getnchannels()
        sample_width = f.getsampwidth()
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    if sample_width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif sample_width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int64)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        data = ints.astype(np.float64) / float(1 << 23)
    else:
        raise ValueError(f"unsupported PCM sample width {8 * sample_width} bits in {path}")
    channels = tuple(data[c::n_channels].copy() for c in range(n_channels))
    return AudioSegment(
        samples=channels,
        sample_rate=float(rate),
        segment_id=segment_id if segment_id is not None else path.stem,
    )


def write_wav(path, segment: AudioSegment) -> None:
    """Write a segment as a 16-bit PCM wave file."""
    stacked = np.stack(segment.samples, axis=1)
    ints = np.clip(np.rint(stacked * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(segment.channel_count)
        f.setsampwidth(2)
        f.setframerate(int(round(segment.sample_rate)))
        f.writeframes(ints.tobytes())


def write_patch_archive(patches: list[Patch], labels: dict[str, str], out_dir) -> Path:
    """Write one ``.npy`` file per patch plus an index listing patches with labels.

    ``labels`` maps segment_id to its class name. Returns the index path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index_path = out / "index.csv"
    with open(index_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["segment_id", "channel", "patch_index", "class_name", "file"])
        for patch in patches:
            name = f"{patch.segment_id}_{patch.channel_index}_{patch.patch_index}.npy"
            np.save(out / name, patch.values)
            writer.writerow(
                [
                    patch.segment_id,
                    patch.channel_index,
                    patch.patch_index,
                    labels.get(patch.segment_id, ""),
                    name,
                ]
            )
    return index_path
