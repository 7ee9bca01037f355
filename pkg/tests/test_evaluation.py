import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlcnn import oracles
from nlcnn.evaluation import (NUM_CROPS, EmbeddingCache, Trial, TrialList, compute_eer, crop_embeddings,
                              mean_pairwise_score, score_trial, ten_crop_starts, ten_crops, evaluate)
from nlcnn.frontend import AudioBuffer, write_wav
from nlcnn.network import build_model
from nlcnn.tensor import Tensor

SR = 16000


class CountingModel:
    """Stand-in embedder: mean LFBE per band, so it is cheap and deterministic."""

    dtype = np.dtype(np.float64)

    def __init__(self):
        self.training = True
        self.rows = 0

    def eval(self):
        self.training = False
        return self

    def train(self, mode=True):
        self.training = mode
        return self

    def embed(self, x):
        self.rows += x.shape[0]
        assert not self.training
        return Tensor(x.data.mean(axis=3)[:, 0] + 30.0)


@pytest.fixture(scope="module")
def model():
    m = build_model("baseline", seed=0)
    m.eval()
    return m


def noise(rng, seconds, amp=0.3):
    return AudioBuffer(rng.uniform(-amp, amp, int(seconds * SR)))


class TestCrops:
    def test_four_seconds_all_at_zero(self):
        assert ten_crop_starts(4 * SR) == [0] * 10

    def test_thirteen_seconds_one_second_apart(self):
        assert ten_crop_starts(13 * SR) == [i * SR for i in range(10)]

    @settings(max_examples=100)
    @given(st.integers(1, 40 * SR))
    def test_closed_form(self, n):
        starts = ten_crop_starts(n)
        assert len(starts) == NUM_CROPS
        if n <= 4 * SR:
            assert starts == [0] * 10
        else:
            assert starts[0] == 0 and starts[-1] == n - 4 * SR
            assert all(abs(s - i * (n - 4 * SR) / 9) <= 0.5 for i, s in enumerate(starts))

    def test_crops_are_four_seconds(self, rng):
        crops = ten_crops(noise(rng, 6.5))
        assert len(crops) == 10 and all(len(c) == 4 * SR for c in crops)

    def test_short_audio_wraps(self, rng):
        audio = noise(rng, 1.0)
        crops = ten_crops(audio)
        assert all(np.array_equal(c.samples, np.tile(audio.samples, 4)) for c in crops)

    def test_empty(self):
        with pytest.raises(ValueError):
            ten_crop_starts(0)


class TestScoring:
    @pytest.mark.parametrize("seconds", [2.5, 4.0])
    def test_identical_audio(self, model, rng, seconds):
        audio = noise(rng, seconds)
        assert abs(score_trial(model, audio, audio) - 1.0) < 1e-6

    def test_identical_long_audio_mixes_crops(self, model, rng):
        # distinct crops pair up too, so only the diagonal is exactly self-similar
        audio = noise(rng, 5.0)
        e = crop_embeddings(model, audio)
        assert abs(score_trial(model, audio, audio) - oracles.mean_pair_cosine_loop(e, e)) < 1e-12

    def test_deterministic(self, model, rng):
        a, b = noise(rng, 4.5), noise(rng, 4.2)
        assert score_trial(model, a, b) == score_trial(model, a, b)

    def test_double_loop_oracle(self, model, rng):
        a, b = noise(rng, 4.6), noise(rng, 5.1)
        want = oracles.mean_pair_cosine_loop(crop_embeddings(model, a), crop_embeddings(model, b))
        assert abs(score_trial(model, a, b) - want) < 1e-12

    def test_crop_embeddings_shape_and_mode(self, rng):
        m = build_model("baseline", seed=1)
        m.train()
        e = crop_embeddings(m, noise(rng, 4.3))
        assert e.shape == (10, 512) and e.dtype == np.float64
        assert m.training

    def test_identical_starts_embedded_once(self, rng):
        m = CountingModel()
        e = crop_embeddings(m, noise(rng, 3.0))
        assert m.rows == 1 and np.array_equal(e, np.repeat(e[:1], 10, axis=0))
        assert m.training

    def test_mean_pairwise(self, rng):
        a, b = rng.normal(size=(10, 6)), rng.normal(size=(10, 6))
        assert abs(mean_pairwise_score(a, b) - oracles.mean_pair_cosine_loop(a, b)) < 1e-12

    def test_zero_embedding(self):
        with pytest.raises(ValueError):
            mean_pairwise_score(np.zeros((2, 3)), np.ones((2, 3)))


class TestEer:
    def test_perfect_separation(self):
        assert compute_eer([0.9, 0.7, 0.4, 0.1], [1, 1, 0, 0]).eer == 0.0

    def test_small_hand_case(self):
        report = compute_eer([0.9, 0.8, 0.7, 0.75, 0.2, 0.1], [1, 1, 1, 0, 0, 0])
        assert abs(report.eer - 1 / 3) < 1e-15
        # FAR(t) = FRR(t) = 1/3 only at t = 0.75 under the accept-if-score>=t rule
        assert report.threshold == 0.75
        assert (report.num_target, report.num_nontarget) == (3, 3)

    def test_matches_exhaustive(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 60))
            scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            report = compute_eer(scores, labels)
            assert (report.eer, report.threshold) == oracles.eer_exhaustive(scores, labels)

    def test_normal_overlap(self):
        rng = np.random.default_rng(7)
        tar, non = rng.normal(1.0, 1.0, 50_000), rng.normal(-1.0, 1.0, 50_000)
        report = compute_eer(np.concatenate([tar, non]), [1] * 50_000 + [0] * 50_000)
        phi = 0.5 * math.erfc(1 / math.sqrt(2))
        assert abs(report.eer - phi) < 0.005

    def test_threshold_within_scores(self, rng):
        s = rng.normal(size=40)
        r = compute_eer(s, rng.permutation([0, 1] * 20))
        assert s.min() <= r.threshold <= s.max() and 0 <= r.eer <= 1

    @pytest.mark.parametrize("labels", [[1, 1], [0, 0]])
    def test_single_class(self, labels):
        with pytest.raises(ValueError):
            compute_eer([0.1, 0.2], labels)

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            compute_eer([0.1, 0.2], [0, 2])

    @settings(max_examples=100)
    @given(st.integers(0, 10_000))
    def test_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=50)
        y = rng.permutation([0, 1] * 25)
        assert compute_eer(s, y).eer == compute_eer(np.exp(s), y).eer == compute_eer(3 * s - 2, y).eer


class TestTrialList:
    def test_roundtrip(self, tmp_path):
        tl = TrialList([Trial(1, "/a.wav", "/b.wav"), Trial(0, "/a.wav", "/c.wav")])
        tl.save(tmp_path / "t.txt")
        assert TrialList.load(tmp_path / "t.txt").trials == tl.trials

    def test_relative_paths(self, tmp_path):
        (tmp_path / "t.txt").write_text("# header\n1 x/a.wav x/b.wav\n\n")
        tl = TrialList.load(tmp_path / "t.txt")
        assert tl.trials[0].path_a == str(tmp_path / "x/a.wav")

    @pytest.mark.parametrize("line", ["2 a b", "1 a", "yes a b"])
    def test_malformed(self, tmp_path, line):
        (tmp_path / "t.txt").write_text(line + "\n")
        with pytest.raises(ValueError):
            TrialList.load(tmp_path / "t.txt")

    def test_label_invariant(self):
        with pytest.raises(ValueError):
            TrialList([Trial(3, "a", "b")])


WAV_SECONDS = (2.0, 3.0, 3.5, 4.3)


@pytest.fixture
def wav_set(tmp_path):
    rng = np.random.default_rng(3)
    paths = []
    for i, seconds in enumerate(WAV_SECONDS):
        p = tmp_path / f"u{i}.wav"
        write_wav(p, AudioBuffer(rng.uniform(-0.4, 0.4, int(seconds * SR))))
        paths.append(str(p))
    trials = [Trial(1, paths[i], paths[i]) for i in range(4)]
    trials += [Trial(0, paths[i], paths[j]) for i in range(4) for j in range(i + 1, 4)]
    return paths, TrialList(trials)


class TestEvaluate:
    def test_cache_does_not_change_eer(self, model, wav_set):
        _, tl = wav_set
        a = evaluate(model, tl, use_cache=True, keep_scores=True)
        b = evaluate(model, tl, use_cache=False, keep_scores=True)
        assert a.eer == b.eer and a.scores == b.scores

    def test_each_file_embedded_once(self, wav_set):
        _, tl = wav_set
        m = CountingModel()
        evaluate(m, tl)
        assert m.rows == sum(len(set(ten_crop_starts(int(sec * SR)))) for sec in WAV_SECONDS) == 13

    def test_self_pairs_smoke(self, model, wav_set):
        r = evaluate(model, wav_set[1])
        assert 0 <= r.eer <= 0.5 and (r.num_target, r.num_nontarget) == (4, 6)
        assert r.summary().startswith("eer=")

    def test_threads_agree(self, model, wav_set):
        a = evaluate(model, wav_set[1], keep_scores=True)
        b = evaluate(model, wav_set[1], threads=3, keep_scores=True)
        assert a.scores == b.scores

    def test_missing_files_skipped(self, model, wav_set, caplog):
        paths, tl = wav_set
        extra = TrialList(tl.trials + [Trial(0, paths[0], "/nope/x.wav"), Trial(1, "/nope/y.wav", paths[1])])
        with caplog.at_level(logging.WARNING):
            r = evaluate(model, extra, keep_scores=True)
        assert r.skipped == 2 and r.missing == ["/nope/x.wav", "/nope/y.wav"]
        assert len(r.scores) == len(tl)
        assert "skipping 2" in caplog.text

    def test_score_dump(self, model, wav_set):
        r = evaluate(model, wav_set[1], keep_scores=True)
        lines = r.score_dump().splitlines()
        assert len(lines) == 10 and lines[0].split()[0] == "1"


def test_cache_first_insert_wins():
    cache = EmbeddingCache()
    a = cache.get("k", lambda: np.ones(2))
    b = cache.get("k", lambda: np.zeros(2))
    assert a is b and len(cache) == 1
