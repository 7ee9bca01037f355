"""WAV decoding and 40-band log filterbank energies (25 ms Hamming, 10 ms hop)."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WINDOW_SAMPLES = 400  # 25 ms
HOP_SAMPLES = 160  # 10 ms
N_FFT = 512
N_MELS = 40
ENERGY_FLOOR = 1e-10


class WavError(ValueError):
    """Base class for WAV decoding failures."""


class UnsupportedCodecError(WavError):
    pass


class SampleRateError(WavError):
    pass


class TruncatedWavError(WavError):
    pass


class TooShortError(ValueError):
    pass


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {s.shape}")
        if s.size and np.max(np.abs(s)) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class LfbeFrames:
    frames: np.ndarray  # T x 40
    frame_shift_s: float = HOP_SAMPLES / SAMPLE_RATE
    frame_length_s: float = WINDOW_SAMPLES / SAMPLE_RATE

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def as_network_input(self, dtype=np.float64) -> np.ndarray:
        """1 x 1 x 40 x T array for the embedding network."""
        return np.ascontiguousarray(self.frames.T[None, None], dtype=dtype)


def load_wav(path) -> AudioBuffer:
    """Decode a 16-bit PCM WAV at 16 kHz; stereo is averaged down to mono."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, nframes = (f.getnchannels(), f.getsampwidth(),
                                              f.getframerate(), f.getnframes())
            raw = f.readframes(nframes)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedCodecError(f"{path}: {msg}") from exc
        raise TruncatedWavError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise TruncatedWavError(f"{path}: header ends early") from exc
    if width != 2:
        raise UnsupportedCodecError(f"{path}: {8 * width}-bit samples, need 16-bit PCM")
    if rate != SAMPLE_RATE:
        raise SampleRateError(f"{path}: sample rate {rate} Hz, need {SAMPLE_RATE}")
    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{path}: {channels} channels")
    if len(raw) < nframes * channels * width:
        raise TruncatedWavError(f"{path}: {len(raw)} data bytes, header promises {nframes * channels * width}")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        pcm = pcm.reshape(-1, 2).mean(axis=1)
    return AudioBuffer(pcm, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(audio.sample_rate)
        f.writeframes(pcm.tobytes())


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 FFT along the last axis (length must be a power of two)."""
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    if n == 0 or n & (n - 1):
        raise ValueError(f"fft length {n} is not a power of two")
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    a = a[..., rev]
    lead = a.shape[:-1]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return a


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = 0.0,
                           fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """``n_mels x (n_fft//2 + 1)`` triangular filters with unit peak, HTK mel spacing."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def num_frames(num_samples: int) -> int:
    if num_samples < WINDOW_SAMPLES:
        return 0
    return (num_samples - WINDOW_SAMPLES) // HOP_SAMPLES + 1


def extract_lfbe(audio: AudioBuffer) -> LfbeFrames:
    if audio.sample_rate != SAMPLE_RATE:
        raise SampleRateError(f"sample rate {audio.sample_rate} Hz, need {SAMPLE_RATE}")
    n = len(audio)
    if n < WINDOW_SAMPLES:
        raise TooShortError(f"{n} samples is shorter than one {WINDOW_SAMPLES}-sample window")
    T = num_frames(n)
    starts = np.arange(T) * HOP_SAMPLES
    frames = audio.samples[starts[:, None] + np.arange(WINDOW_SAMPLES)]
    frames = frames * np.hamming(WINDOW_SAMPLES)
    padded = np.zeros((T, N_FFT))
    padded[:, :WINDOW_SAMPLES] = frames
    spec = fft(padded)[:, : N_FFT // 2 + 1]
    power = spec.real ** 2 + spec.imag ** 2
    energies = power @ mel_filterbank().T
    return LfbeFrames(np.log(np.maximum(energies, ENERGY_FLOOR)))


def crop_segment(audio: AudioBuffer, start_s: float, duration_s: float) -> AudioBuffer:
    """Samples ``[start, start + duration)``, wrapping around the utterance end.

    An utterance shorter than the requested duration therefore comes back
    repeated until it fills the span.
    """
    if len(audio) == 0:
        raise ValueError("cannot crop empty audio")
    if start_s < 0 or duration_s <= 0:
        raise ValueError(f"invalid crop start={start_s} duration={duration_s}")
    start = int(round(start_s * audio.sample_rate))
    length = int(round(duration_s * audio.sample_rate))
    idx = (start + np.arange(length)) % len(audio)
    return AudioBuffer(audio.samples[idx], audio.sample_rate)
