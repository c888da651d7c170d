"""Audio front end: PCM reading, a deterministic stand-in codec, code files.

The stand-in codec turns a waveform into an integer matrix ``(frames, n_q)``
with the same shape contract as a neural codec's quantized output:

1. split into non-overlapping frames of ``sample_rate / frame_rate`` samples,
2. Hann window + magnitude spectrum,
3. pool power into ``n_bands`` triangular mel bands, log10, clamp,
4. project onto ``n_q`` fixed random directions (seeded),
5. uniform quantization of each projection into ``codebook_size`` bins.

Real codec output can be brought in through :func:`read_codes`.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, CorruptHeader, ShapeMismatch, TooShort, UnsupportedEncoding

CODES_MAGIC = b"A2CC"
CODES_VERSION = 1
_CODES_HEADER = struct.Struct("<4sBIHHI")

DEFAULT_FRAME_RATE = 50.0
DEFAULT_N_Q = 4
DEFAULT_CODEBOOK_SIZE = 1024
DEFAULT_N_BANDS = 32
LOG_ENERGY_RANGE = (-6.0, 2.0)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class AudioCodes:
    frame_rate_hz: float
    n_q: int
    codebook_size: int
    codes: np.ndarray  # (frames, n_q) integers in [0, codebook_size)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(-1, self.n_q)
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.codebook_size):
            raise ShapeMismatch("code value outside [0, codebook_size)")

    @property
    def n_frames(self) -> int:
        return self.codes.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.frame_rate_hz

    def slice_frames(self, start: int, stop: int) -> "AudioCodes":
        return AudioCodes(self.frame_rate_hz, self.n_q, self.codebook_size, self.codes[start:stop])


# ---------------------------------------------------------------------------
# waveforms
# ---------------------------------------------------------------------------


def read_wave(path) -> Waveform:
    """Read 16-bit PCM; stereo is averaged to mono, samples scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as fh:
            width = fh.getsampwidth()
            channels = fh.getnchannels()
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except (wave.Error, EOFError, struct.error) as exc:
        raise CorruptHeader(f"{path}: {exc}") from None
    if width != 2:
        raise UnsupportedEncoding(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{path}: {channels} channels")
    data = np.frombuffer(raw, dtype="<i2")
    if len(data) % channels:
        raise CorruptHeader(f"{path}: truncated sample data")
    data = data.reshape(-1, channels).astype(np.float64).mean(axis=1)
    return Waveform(data / 32768.0, rate)


def write_wave(w: Waveform, path) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate_hz))
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# stand-in codec
# ---------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def band_centers_hz(sample_rate_hz: int, n_bands: int = DEFAULT_N_BANDS) -> np.ndarray:
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate_hz / 2.0), n_bands + 2))
    return edges[1:-1]


def mel_filterbank(sample_rate_hz: int, frame_len: int, n_bands: int = DEFAULT_N_BANDS) -> np.ndarray:
    """Triangular mel filters, shape ``(n_bands, frame_len // 2 + 1)``."""
    freqs = np.fft.rfftfreq(frame_len, d=1.0 / sample_rate_hz)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate_hz / 2.0), n_bands + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def projection_matrix(seed: int, n_q: int, n_bands: int = DEFAULT_N_BANDS) -> np.ndarray:
    """Seeded ``(n_q, n_bands)`` directions, each row with unit L1 norm."""
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((n_q, n_bands))
    return proj / np.abs(proj).sum(axis=1, keepdims=True)


def frame_signal(w: Waveform, frame_rate_hz: float) -> np.ndarray:
    """Non-overlapping frames, zero-padded so there are round(duration * rate)."""
    frame_len = int(round(w.sample_rate_hz / frame_rate_hz))
    n_frames = int(round(w.duration_s * frame_rate_hz))
    if n_frames < 1 or frame_len < 2:
        raise TooShort(f"{w.duration_s:.4f} s holds no full {1000 / frame_rate_hz:.1f} ms frame")
    x = np.zeros(n_frames * frame_len)
    take = min(len(w.samples), len(x))
    x[:take] = w.samples[:take]
    return x.reshape(n_frames, frame_len)


def band_log_energies(
    w: Waveform,
    frame_rate_hz: float = DEFAULT_FRAME_RATE,
    n_bands: int = DEFAULT_N_BANDS,
) -> np.ndarray:
    """Clamped log10 band power per frame, shape ``(frames, n_bands)``."""
    frames = frame_signal(w, frame_rate_hz)
    frame_len = frames.shape[1]
    window = np.hanning(frame_len + 1)[:-1]  # periodic Hann
    spec = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2 / window.sum() ** 2
    power = spec @ mel_filterbank(w.sample_rate_hz, frame_len, n_bands).T
    lo, hi = LOG_ENERGY_RANGE
    return np.clip(np.log10(power + 1e-12), lo, hi)


def pseudo_codec_encode(
    w: Waveform,
    frame_rate_hz: float = DEFAULT_FRAME_RATE,
    n_q: int = DEFAULT_N_Q,
    codebook_size: int = DEFAULT_CODEBOOK_SIZE,
    seed: int = 0,
    n_bands: int = DEFAULT_N_BANDS,
) -> AudioCodes:
    """Deterministic integer codes for ``w``; see the module docstring."""
    energies = band_log_energies(w, frame_rate_hz, n_bands)
    lo, hi = LOG_ENERGY_RANGE
    half = (hi - lo) / 2.0
    centred = energies - (lo + half)
    # unit-L1 rows keep every projection inside [-half, half]
    values = centred @ projection_matrix(seed, n_q, n_bands).T
    codes = np.floor((values + half) / (2 * half) * codebook_size).astype(np.int64)
    codes = np.clip(codes, 0, codebook_size - 1)
    return AudioCodes(frame_rate_hz, n_q, codebook_size, codes)


# ---------------------------------------------------------------------------
# code files
# ---------------------------------------------------------------------------


def codes_to_bytes(codes: AudioCodes) -> bytes:
    if codes.codebook_size > 0xFFFF or codes.n_q > 0xFFFF:
        raise ShapeMismatch("codebook_size and n_q must fit in u16")
    header = _CODES_HEADER.pack(
        CODES_MAGIC,
        CODES_VERSION,
        int(round(codes.frame_rate_hz * 1000)),
        codes.n_q,
        codes.codebook_size,
        codes.n_frames,
    )
    return header + codes.codes.astype("<u2").tobytes()


def codes_from_bytes(data: bytes) -> AudioCodes:
    if len(data) < _CODES_HEADER.size or data[:4] != CODES_MAGIC:
        raise BadMagic("not a codes file")
    _, version, rate_mhz, n_q, codebook_size, n_frames = _CODES_HEADER.unpack_from(data)
    if version != CODES_VERSION:
        raise BadMagic(f"unsupported codes file version {version}")
    if n_q == 0 or codebook_size == 0:
        raise ShapeMismatch("n_q and codebook_size must be positive")
    body = data[_CODES_HEADER.size:]
    if len(body) != 2 * n_frames * n_q:
        raise ShapeMismatch(f"expected {n_frames}x{n_q} codes, got {len(body) // 2} values")
    codes = np.frombuffer(body, dtype="<u2").astype(np.int64).reshape(n_frames, n_q)
    if codes.size and codes.max() >= codebook_size:
        raise ShapeMismatch(f"code {codes.max()} >= codebook size {codebook_size}")
    return AudioCodes(rate_mhz / 1000.0, n_q, codebook_size, codes)


def write_codes(codes: AudioCodes, path) -> None:
    Path(path).write_bytes(codes_to_bytes(codes))


def read_codes(path) -> AudioCodes:
    return codes_from_bytes(Path(path).read_bytes())
