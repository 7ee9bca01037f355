import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlcnn import oracles
from nlcnn.frontend import (ENERGY_FLOOR, AudioBuffer, SampleRateError, TooShortError, TruncatedWavError,
                            UnsupportedCodecError, WavError, crop_segment, extract_lfbe, fft, load_wav,
                            mel_center_frequencies, mel_filterbank, num_frames, write_wav)

from conftest import tone

GOLDEN_PCM = [0, 1, -1, 32767, -32768, 16384, -16384, 100, 7, -7]


def riff(pcm, rate=16000, channels=1, bits=16, fmt_tag=1, data_len=None):
    """Hand-assembled RIFF/WAVE bytes, independent of the stdlib writer."""
    payload = struct.pack(f"<{len(pcm)}h", *pcm)
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * block, block, bits)
    n = len(payload) if data_len is None else data_len
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", n) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


@pytest.fixture
def wav_file(tmp_path):
    def make(data: bytes, name="x.wav"):
        p = tmp_path / name
        p.write_bytes(data)
        return p
    return make


class TestLoadWav:
    def test_golden_fixture_values(self, wav_file):
        audio = load_wav(wav_file(riff(GOLDEN_PCM)))
        want = [0.0, 1 / 32768, -1 / 32768, 32767 / 32768, -1.0, 0.5, -0.5, 100 / 32768]
        assert audio.samples[:8].tolist() == want

    def test_two_seconds(self, wav_file):
        audio = load_wav(wav_file(riff([3] * 32000)))
        assert len(audio) == 32000 and audio.duration == 2.0

    def test_all_zero(self, wav_file):
        assert not np.any(load_wav(wav_file(riff([0] * 500))).samples)

    def test_stereo_is_averaged(self, wav_file):
        audio = load_wav(wav_file(riff([100, 300, -200, 0], channels=2)))
        assert audio.samples.tolist() == [200 / 32768, -100 / 32768]

    def test_non_pcm_codec(self, wav_file):
        with pytest.raises(UnsupportedCodecError):
            load_wav(wav_file(riff([0] * 8, fmt_tag=3)))

    def test_eight_bit(self, wav_file):
        data = riff([0] * 8, bits=8)
        with pytest.raises(UnsupportedCodecError):
            load_wav(wav_file(data))

    def test_wrong_rate(self, wav_file):
        with pytest.raises(SampleRateError):
            load_wav(wav_file(riff([0] * 8, rate=8000)))

    def test_truncated_payload(self, wav_file):
        with pytest.raises(TruncatedWavError):
            load_wav(wav_file(riff([1] * 100, data_len=400)))

    def test_truncated_header(self, wav_file):
        with pytest.raises(TruncatedWavError):
            load_wav(wav_file(riff([1] * 100)[:30]))

    def test_error_kinds_are_distinct(self):
        kinds = {UnsupportedCodecError, SampleRateError, TruncatedWavError}
        assert len(kinds) == 3 and all(issubclass(k, WavError) for k in kinds)

    def test_write_roundtrip(self, tmp_path, rng):
        pcm = rng.integers(-32768, 32768, size=1000)
        p = tmp_path / "r.wav"
        write_wav(p, AudioBuffer(pcm / 32768.0))
        assert np.array_equal(load_wav(p).samples * 32768, pcm)


class TestAudioBuffer:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            AudioBuffer(np.array([0.0, 1.5]))

    def test_rejects_stereo_array(self):
        with pytest.raises(ValueError):
            AudioBuffer(np.zeros((4, 2)))


class TestFft:
    @pytest.mark.parametrize("n", [1, 2, 8, 64, 512])
    def test_matches_naive_dft(self, rng, n):
        x = rng.normal(size=(3, n)) + 1j * rng.normal(size=(3, n))
        assert np.max(np.abs(fft(x) - oracles.dft_naive(x))) < 1e-9 * max(n, 1)

    def test_not_power_of_two(self):
        with pytest.raises(ValueError):
            fft(np.zeros(400))

    def test_impulse(self):
        x = np.zeros(16)
        x[0] = 1.0
        assert np.allclose(fft(x), 1.0)


class TestFilterbank:
    def test_shape_and_nonnegative(self):
        fb = mel_filterbank()
        assert fb.shape == (40, 257)
        assert np.all(fb >= 0)
        assert np.all(fb.sum(axis=1) > 0)

    def test_triangles_overlap_neighbours(self):
        fb = mel_filterbank()
        for i in range(39):
            assert np.any((fb[i] > 0) & (fb[i + 1] > 0))

    def test_each_row_is_unimodal(self):
        for row in mel_filterbank():
            nz = row[row > 0]
            peak = int(np.argmax(nz))
            assert np.all(np.diff(nz[: peak + 1]) >= 0) and np.all(np.diff(nz[peak:]) <= 0)

    def test_centers_span_to_nyquist(self):
        c = mel_center_frequencies()
        assert 0 < c[0] < c[-1] < 8000 and np.all(np.diff(c) > 0)


class TestExtractLfbe:
    def test_two_seconds_gives_198_frames(self):
        assert extract_lfbe(AudioBuffer(np.zeros(32000))).num_frames == 198

    def test_silence_is_floor(self):
        frames = extract_lfbe(AudioBuffer(np.zeros(1600))).frames
        assert frames.shape[1] == 40
        assert np.all(frames == np.log(ENERGY_FLOOR))

    def test_too_short(self):
        with pytest.raises(TooShortError):
            extract_lfbe(AudioBuffer(np.zeros(399)))

    def test_exactly_one_window(self):
        assert extract_lfbe(AudioBuffer(np.zeros(400))).num_frames == 1

    def test_wrong_rate(self):
        with pytest.raises(SampleRateError):
            extract_lfbe(AudioBuffer(np.zeros(800), 8000))

    def test_tone_peak_band(self):
        audio = AudioBuffer(tone(1000.0, 0.5))
        lfbe = extract_lfbe(audio).frames
        nearest = int(np.argmin(np.abs(mel_center_frequencies() - 1000.0)))
        # direct DFT oracle on one frame
        frame = audio.samples[1600:2000] * (0.54 - 0.46 * np.cos(2 * np.pi * np.arange(400) / 399))
        padded = np.zeros(512)
        padded[:400] = frame
        power = np.abs(oracles.dft_naive(padded)[:257]) ** 2
        direct = np.log(np.maximum(mel_filterbank() @ power, ENERGY_FLOOR))
        assert np.max(np.abs(direct - lfbe[10])) < 1e-8
        assert int(np.argmax(direct)) == nearest
        assert np.all(np.argmax(lfbe, axis=1) == nearest)

    @settings(max_examples=100)
    @given(st.integers(400, 20000))
    def test_frame_count_formula(self, n):
        assert num_frames(n) == (n - 400) // 160 + 1

    def test_frame_count_on_audio(self, rng):
        for n in rng.integers(400, 6000, size=20):
            assert extract_lfbe(AudioBuffer(np.zeros(int(n)))).num_frames == (n - 400) // 160 + 1

    def test_floor_is_lower_bound(self, rng):
        frames = extract_lfbe(AudioBuffer(rng.uniform(-1e-6, 1e-6, 4000))).frames
        assert np.all(frames >= np.log(ENERGY_FLOOR))

    def test_network_input_layout(self, rng):
        lfbe = extract_lfbe(AudioBuffer(rng.uniform(-0.5, 0.5, 4000)))
        x = lfbe.as_network_input()
        assert x.shape == (1, 1, 40, lfbe.num_frames)
        assert np.array_equal(x[0, 0], lfbe.frames.T)


class TestCrop:
    def test_index_arithmetic(self, rng):
        audio = AudioBuffer(rng.uniform(-1, 1, 160000))
        out = crop_segment(audio, 2.0, 4.0)
        assert np.array_equal(out.samples, audio.samples[32000:96000])

    def test_wrap_pad(self, rng):
        audio = AudioBuffer(rng.uniform(-1, 1, 16000))
        out = crop_segment(audio, 0.0, 2.0)
        assert np.array_equal(out.samples, np.concatenate([audio.samples, audio.samples]))

    def test_commutes_with_features(self, rng):
        audio = AudioBuffer(rng.uniform(-1, 1, 48000))
        a = extract_lfbe(crop_segment(audio, 0.5, 1.0)).frames
        b = extract_lfbe(AudioBuffer(audio.samples[8000:24000])).frames
        assert np.array_equal(a, b)

    def test_empty(self):
        with pytest.raises(ValueError):
            crop_segment(AudioBuffer(np.zeros(0)), 0.0, 1.0)

    @pytest.mark.parametrize("start,dur", [(-0.1, 1.0), (0.0, 0.0), (0.0, -2.0)])
    def test_invalid_span(self, start, dur):
        with pytest.raises(ValueError):
            crop_segment(AudioBuffer(np.zeros(100)), start, dur)
