"""Synthetic "speakers" for desk-scale runs.

Each speaker owns a fixed spectral envelope (a few resonances), a pitch
range and a harmonic-amplitude pattern. Every utterance renders that voice
with per-utterance nuisance: syllable-rate amplitude gating, pitch drift,
a random channel tilt, a gain and additive coloured noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .frontend import SAMPLE_RATE, AudioBuffer, write_wav


@dataclass(frozen=True)
class SpeakerVoice:
    f0: float
    formants: Tuple[float, ...]
    bandwidths: Tuple[float, ...]
    harmonic_weights: np.ndarray  # per-harmonic gain multipliers
    noise_filter: np.ndarray  # short FIR shaping the breath noise

    @classmethod
    def random(cls, rng: np.random.Generator, num_harmonics: int = 40) -> "SpeakerVoice":
        f0 = float(rng.uniform(90.0, 260.0))
        formants = tuple(sorted(float(f) for f in (rng.uniform(300, 900), rng.uniform(900, 2400),
                                                   rng.uniform(2400, 3800))))
        bandwidths = tuple(float(b) for b in rng.uniform(80.0, 250.0, size=3))
        weights = np.exp(rng.normal(0.0, 0.6, size=num_harmonics))
        taps = rng.normal(0.0, 1.0, size=16) * np.exp(-np.arange(16) / 4.0)
        return cls(f0, formants, bandwidths, weights, taps / np.linalg.norm(taps))

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        env = np.full_like(freqs, 0.02)
        for fc, bw in zip(self.formants, self.bandwidths):
            env = env + 1.0 / (1.0 + ((freqs - fc) / (0.5 * bw)) ** 2)
        return env


def _syllable_gate(rng: np.random.Generator, n: int) -> np.ndarray:
    """Smooth on/off gating at a few syllables per second."""
    gate = np.zeros(n)
    pos = int(rng.integers(0, SAMPLE_RATE // 8))
    while pos < n:
        length = int(rng.uniform(0.12, 0.35) * SAMPLE_RATE)
        seg = np.hanning(length) ** 0.5
        end = min(n, pos + length)
        gate[pos:end] = np.maximum(gate[pos:end], seg[: end - pos])
        pos = end + int(rng.uniform(0.03, 0.15) * SAMPLE_RATE)
    return gate


def render_utterance(voice: SpeakerVoice, rng: np.random.Generator, duration_s: float = 3.0,
                     snr_db_range=(0.0, 20.0), tilt_range=(-1.0, 1.0)) -> AudioBuffer:
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    # pitch contour: per-utterance offset plus slow wobble
    f0 = voice.f0 * np.exp(rng.normal(0.0, 0.04)) * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(0.3, 2.0) * t
                                                                         + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    voiced = np.zeros(n)
    mean_f0 = float(np.mean(f0))
    for k, w in enumerate(voice.harmonic_weights, start=1):
        if k * mean_f0 >= 0.45 * SAMPLE_RATE:
            break
        amp = w * voice.envelope(np.array([k * mean_f0]))[0]
        voiced += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    breath = np.convolve(rng.normal(size=n), voice.noise_filter, mode="same")
    signal = (voiced / (np.std(voiced) + 1e-12) + 0.15 * breath) * _syllable_gate(rng, n)

    # channel: random spectral tilt applied in the frequency domain
    spec = np.fft.rfft(signal)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    tilt = rng.uniform(*tilt_range)
    spec *= (1.0 + freqs / 1000.0) ** tilt
    signal = np.fft.irfft(spec, n)

    noise = np.cumsum(rng.normal(size=n)) * rng.uniform(0.0, 0.05) + rng.normal(size=n)
    noise -= noise.mean()
    snr = rng.uniform(*snr_db_range)
    p_sig = np.mean(signal ** 2) + 1e-12
    noise *= np.sqrt(p_sig / (np.mean(noise ** 2) * 10 ** (snr / 10)))
    mix = signal + noise
    mix *= rng.uniform(0.05, 0.7) / (np.max(np.abs(mix)) + 1e-12)
    return AudioBuffer(mix, SAMPLE_RATE)


@dataclass
class SyntheticCorpus:
    root: Path
    manifest: Path
    trials: Path
    train_paths: Dict[str, List[str]]
    heldout_paths: Dict[str, List[str]]


def generate_corpus(root, num_speakers: int = 10, train_utts: int = 40, heldout_utts: int = 10,
                    duration_s: float = 3.0, num_trials: int = 200, seed: int = 0) -> SyntheticCorpus:
    """Write WAVs, ``manifest.txt`` (training utterances) and ``trials.txt``.

    Trials pair held-out utterances only, half same-speaker and half not.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    voices = [SpeakerVoice.random(rng) for _ in range(num_speakers)]
    train: Dict[str, List[str]] = {}
    held: Dict[str, List[str]] = {}
    for s, voice in enumerate(voices):
        spk = f"spk{s:02d}"
        (root / spk).mkdir(exist_ok=True)
        for i in range(train_utts + heldout_utts):
            rel = f"{spk}/utt{i:03d}.wav"
            write_wav(root / rel, render_utterance(voice, rng, duration_s))
            (train if i < train_utts else held).setdefault(spk, []).append(rel)
    manifest = root / "manifest.txt"
    manifest.write_text("".join(f"{spk} {p}\n" for spk, ps in train.items() for p in ps))

    lines = []
    spks = list(held)
    pairs = set()
    while len(lines) < num_trials:
        target = len(lines) % 2 == 0
        a_spk = spks[rng.integers(len(spks))]
        if target:
            b_spk = a_spk
        else:
            b_spk = spks[(spks.index(a_spk) + 1 + rng.integers(len(spks) - 1)) % len(spks)]
        a = held[a_spk][rng.integers(len(held[a_spk]))]
        b = held[b_spk][rng.integers(len(held[b_spk]))]
        if a == b or (a, b) in pairs or (b, a) in pairs:
            continue
        pairs.add((a, b))
        lines.append(f"{int(target)} {a} {b}\n")
    trials = root / "trials.txt"
    trials.write_text("".join(lines))
    return SyntheticCorpus(root, manifest, trials, train, held)
