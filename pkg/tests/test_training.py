import re
import warnings

import numpy as np
import pytest

from nlcnn import checkpoint as ckpt
from nlcnn.frontend import AudioBuffer
from nlcnn.network import build_model
from nlcnn.synthetic import generate_corpus
from nlcnn.tensor import Tensor, no_grad
from nlcnn.training import (AdamState, DatasetManifest, ManifestError, TrainConfig, TrainingAbort, adam_step,
                            learning_rate, load_checkpoint, make_head, materialize, prefetch_batches,
                            sample_epoch, save_checkpoint, train)

SR = 16000


def memory_manifest(counts, seconds=1.0, seed=0):
    """Manifest whose audio is pre-decoded, so no files are touched."""
    rng = np.random.default_rng(seed)
    speakers = {f"s{i}": [f"/mem/s{i}/u{j}.wav" for j in range(n)] for i, n in enumerate(counts)}
    m = DatasetManifest(speakers)
    for path in m.all_paths():
        m._audio[path] = AudioBuffer(rng.uniform(-0.3, 0.3, int(seconds * SR)))
    return m


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    c = generate_corpus(root, num_speakers=3, train_utts=4, heldout_utts=2, duration_s=1.0, num_trials=6, seed=1)
    return c


def tiny(**kw):
    base = dict(epochs=2, segment_s=0.5, speakers_per_batch=3, seed=3)
    base.update(kw)
    return TrainConfig.desk(**base)


class TestSchedule:
    @pytest.mark.parametrize("epoch,want", [(0, 1e-3), (9, 1e-3), (10, 9.5e-4), (100, 1e-3 * 0.95 ** 10)])
    def test_values(self, epoch, want):
        assert learning_rate(epoch) == pytest.approx(want, rel=1e-15)

    def test_epoch_hundred(self):
        assert abs(learning_rate(100) - 5.987e-4) < 1e-7

    def test_closed_form_all_epochs(self):
        cfg = TrainConfig()
        assert all(cfg.lr(e) == 0.001 * 0.95 ** (e // 10) for e in range(501))


class TestConfig:
    def test_paper_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.lr0, c.segment_s, c.max_utt_per_speaker) == (500, 1e-3, 2.0, 100)
        assert (c.adam_beta1, c.adam_beta2, c.adam_eps) == (0.9, 0.999, 1e-8)

    def test_desk(self):
        c = TrainConfig.desk()
        assert (c.epochs, c.speakers_per_batch, c.utterances_per_speaker) == (30, 8, 2)

    @pytest.mark.parametrize("kw", [dict(segment_s=0), dict(max_utt_per_speaker=-1), dict(loss="triplet"),
                                    dict(loss="ap", utterances_per_speaker=1)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestManifest:
    def test_load_relative(self, tmp_path):
        (tmp_path / "m.txt").write_text("a x/1.wav\nb /abs/2.wav\n# note\n\na x/3.wav\n")
        m = DatasetManifest.load(tmp_path / "m.txt")
        assert m.speakers == {"a": [str(tmp_path / "x/1.wav"), str(tmp_path / "x/3.wav")], "b": ["/abs/2.wav"]}

    @pytest.mark.parametrize("line", ["a", "a  b.wav", "a b c"])
    def test_malformed(self, tmp_path, line):
        (tmp_path / "m.txt").write_text(line + "\n")
        with pytest.raises(ManifestError, match=":1:"):
            DatasetManifest.load(tmp_path / "m.txt")

    def test_empty(self, tmp_path):
        (tmp_path / "m.txt").write_text("\n")
        with pytest.raises(ManifestError):
            DatasetManifest.load(tmp_path / "m.txt")

    def test_strict_checks_files(self, tmp_path):
        (tmp_path / "m.txt").write_text("a missing.wav\n")
        DatasetManifest.load(tmp_path / "m.txt")
        with pytest.raises(ManifestError, match="missing.wav"):
            DatasetManifest.load(tmp_path / "m.txt", strict=True)

    def test_speakers_sorted(self):
        assert memory_manifest([1, 1, 1]).speaker_ids == ["s0", "s1", "s2"]


class TestSampling:
    def test_caps_at_hundred(self):
        m = memory_manifest([150, 30], seconds=0.1)
        rows = [(lab, p) for plan in sample_epoch(m, TrainConfig.desk(), 0) for lab, p in zip(plan.labels, plan.paths)]
        assert sum(lab == 0 for lab, _ in rows) == 100
        assert sum(lab == 1 for lab, _ in rows) == 30
        assert len(set(rows)) == len(rows)

    def test_deterministic_per_epoch(self):
        m = memory_manifest([12, 9, 7])
        assert sample_epoch(m, tiny(), 4) == sample_epoch(m, tiny(), 4)
        assert sample_epoch(m, tiny(), 4) != sample_epoch(m, tiny(), 5)

    def test_batches_hold_distinct_speakers_in_groups(self):
        m = memory_manifest([9, 8, 6, 5, 4])
        cfg = TrainConfig.desk(speakers_per_batch=3, utterances_per_speaker=2, loss="ap")
        for plan in sample_epoch(m, cfg, 0):
            labels = list(plan.labels)
            assert len(labels) % 2 == 0
            groups = [labels[i:i + 2] for i in range(0, len(labels), 2)]
            assert all(g[0] == g[1] for g in groups)
            assert len({g[0] for g in groups}) == len(groups) <= 3
            assert len(groups) >= 2
            assert labels == sorted(labels)
            pairs = [plan.paths[i:i + 2] for i in range(0, len(labels), 2)]
            assert all(a != b for a, b in pairs)

    def test_crop_starts_in_range(self):
        m = memory_manifest([6, 6], seconds=3.0)
        for plan in sample_epoch(m, tiny(segment_s=2.0), 0):
            assert all(0 <= s <= SR for s in plan.starts)

    def test_short_utterance_starts_at_zero(self):
        m = memory_manifest([4, 4], seconds=1.0)
        assert all(s == 0 for plan in sample_epoch(m, tiny(segment_s=2.0), 0) for s in plan.starts)

    def test_ap_single_utterance_fallback(self):
        m = memory_manifest([1, 4, 4])
        with pytest.warns(RuntimeWarning, match="s0"):
            plans = sample_epoch(m, tiny(loss="ap"), 0)
        rows = [p for plan in plans for lab, p in zip(plan.labels, plan.paths) if lab == 0]
        assert rows == [m.speakers["s0"][0]] * 2

    def test_two_second_crop_gives_198_frames(self):
        m = memory_manifest([2, 2], seconds=2.5)
        batch = materialize(m, sample_epoch(m, tiny(segment_s=2.0), 0)[0], 2.0)
        assert batch.features.shape[1:] == (1, 40, 198)

    def test_prefetch_preserves_order(self):
        m = memory_manifest([5, 5, 5, 5])
        plans = sample_epoch(m, tiny(speakers_per_batch=2), 0)
        assert len(plans) > 2
        direct = [materialize(m, p, 0.5) for p in plans]
        fetched = list(prefetch_batches(m, plans, 0.5, depth=1))
        assert [b.plan for b in fetched] == plans
        assert all(np.array_equal(a.features, b.features) for a, b in zip(direct, fetched))

    def test_prefetch_surfaces_errors(self):
        m = DatasetManifest({"a": ["/nope/1.wav", "/nope/2.wav"]})
        plan = sample_epoch(memory_manifest([2]), tiny(), 0)[0]
        plan = type(plan)(0, 0, (0, 0), ("/nope/1.wav", "/nope/2.wav"), (0, 0), 2)
        with pytest.raises(ManifestError):
            list(prefetch_batches(m, [plan], 0.5))


class TestAdam:
    def test_zero_gradient_no_change(self, rng):
        p = Tensor(rng.normal(size=4))
        before = p.data.copy()
        adam_step({"p": p}, {"p": np.zeros(4)}, AdamState(), 1e-3)
        assert np.array_equal(p.data, before)

    @pytest.mark.parametrize("g", [0.3, -2.0, 1e-6])
    def test_first_step_scalar(self, g):
        p = Tensor(np.array([1.0]))
        adam_step({"p": p}, {"p": np.array([g])}, AdamState(), 1e-3)
        assert p.data[0] == pytest.approx(1.0 - 1e-3 * g / (abs(g) + 1e-8), rel=0, abs=1e-15)

    def test_three_steps_scalar_oracle(self):
        gs, lr, b1, b2, eps = [0.5, -0.2, 0.1], 0.01, 0.9, 0.999, 1e-8
        x, m, v = 2.0, 0.0, 0.0
        for t, g in enumerate(gs, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        p, state = Tensor(np.array([2.0])), AdamState()
        for g in gs:
            adam_step({"p": p}, {"p": np.array([g])}, state, lr)
        assert state.step == 3 and abs(p.data[0] - x) < 1e-15

    def test_identical_trajectories(self, rng):
        grads = [rng.normal(size=3) for _ in range(5)]

        def run():
            p, s = Tensor(np.ones(3)), AdamState()
            for g in grads:
                adam_step({"p": p}, {"p": g}, s, 1e-2)
            return p.data

        assert np.array_equal(run(), run())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"p": Tensor(np.ones(3))}, {"p": np.ones(2)}, AdamState(), 1e-3)


class TestCheckpoint:
    def test_roundtrip_embeds_bitwise(self, tmp_path, rng):
        model = build_model("var2", seed=2)
        for name, p in model.named_parameters():
            if name.endswith("z_w"):
                p.data = rng.normal(0, 0.1, size=p.shape).astype(np.float32)
        model.train()
        with no_grad():
            model.embed(Tensor(rng.normal(size=(2, 1, 40, 16)).astype(np.float32)))  # move running stats
        head = make_head(TrainConfig.desk(), 5, 512)
        adam = AdamState(step=3, m={"x": np.ones(2)}, v={"x": np.full(2, 2.0)})
        save_checkpoint(tmp_path / "c.nlck", model, head, adam, epoch=7, history={"loss": [1.0, 0.5]})

        other, head2, adam2 = build_model("var2", seed=99), make_head(TrainConfig.desk(seed=5), 5, 512), AdamState()
        assert load_checkpoint(tmp_path / "c.nlck", other, head2, adam2) == 7
        x = Tensor(rng.normal(size=(1, 1, 40, 20)).astype(np.float32))
        model.eval()
        other.eval()
        with no_grad():
            assert np.array_equal(model.embed(x).data, other.embed(x).data)
        assert np.array_equal(head.class_weights.data, head2.class_weights.data)
        assert adam2.step == 3 and adam2.v["x"].tolist() == [2.0, 2.0]
        assert ckpt.load(tmp_path / "c.nlck")["history/loss"].tolist() == [1.0, 0.5]

    def test_architecture_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.nlck", build_model("baseline"))
        with pytest.raises(ckpt.ContainerError):
            load_checkpoint(tmp_path / "c.nlck", build_model("var2"))


class TestTrainLoop:
    def test_writes_log_and_checkpoints(self, toy, tmp_path):
        man = DatasetManifest.load(toy.manifest)
        r = train(man, "baseline", tiny(), out_dir=tmp_path)
        lines = (tmp_path / "metrics.log").read_text().splitlines()
        assert [re.fullmatch(r"epoch=(\d+) loss=\d+\.\d{6} lr=[\d.e-]+", l).group(1) for l in lines] == ["0", "1"]
        assert [p.name for p in r.checkpoints] == ["epoch_0000.nlck", "epoch_0001.nlck"]
        assert (tmp_path / "best.nlck").exists() and r.best_epoch == int(np.argmin(r.history["loss"]))

    def test_validation_eer_logged(self, toy, tmp_path):
        from nlcnn.evaluation import TrialList
        man = DatasetManifest.load(toy.manifest)
        r = train(man, "baseline", tiny(epochs=1), out_dir=tmp_path, validation=TrialList.load(toy.trials))
        assert " eer=" in (tmp_path / "metrics.log").read_text()
        assert len(r.history["eer"]) == 1

    def test_resume_matches_uninterrupted(self, toy, tmp_path):
        man = DatasetManifest.load(toy.manifest)
        full = train(man, "var2", tiny(epochs=3), variant="time")
        part = train(man, "var2", tiny(epochs=2), out_dir=tmp_path, variant="time")
        resumed = train(man, "var2", tiny(epochs=3), variant="time", resume=part.checkpoints[-1])
        assert resumed.history["loss"] == full.history["loss"]
        a, b = dict(full.model.named_parameters()), dict(resumed.model.named_parameters())
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

    def test_frozen_output_weights_follow_baseline(self, toy):
        man = DatasetManifest.load(toy.manifest)
        nl = train(man, "var2", tiny(), freeze=("z_w",))
        base = train(man, "baseline", tiny())
        assert nl.history["loss"] == base.history["loss"]
        b = dict(base.model.named_parameters())
        n = dict(nl.model.named_parameters())
        assert all(np.array_equal(b[k].data, n[k].data) for k in b)
        assert all(not np.any(p.data) for k, p in n.items() if k.endswith("z_w"))

    def test_ap_loss_trains(self, toy):
        man = DatasetManifest.load(toy.manifest)
        r = train(man, "baseline", tiny(loss="ap", epochs=1))
        assert np.isfinite(r.history["loss"][0]) and r.head.w.data[0] != 10.0

    def test_non_finite_aborts_with_batch_id(self, toy, tmp_path):
        man = DatasetManifest.load(toy.manifest)
        model = build_model("baseline", seed=0)
        model.fc.bias.data = np.full(model.fc.bias.shape, np.nan, dtype=np.float32)
        with pytest.raises(TrainingAbort) as info:
            train(man, "baseline", tiny(), out_dir=tmp_path, model=model)
        assert info.value.epoch == 0 and info.value.batch_id == 0
        dump = (tmp_path / "abort_batch.txt").read_text()
        assert dump.startswith("epoch=0 batch=0") and "utt" in dump

    def test_same_seed_same_run(self, toy):
        man = DatasetManifest.load(toy.manifest)
        assert train(man, "baseline", tiny(epochs=1)).history == train(man, "baseline", tiny(epochs=1)).history

    def test_epoch_callback(self, toy):
        seen = []
        train(DatasetManifest.load(toy.manifest), "baseline", tiny(), epoch_callback=lambda e, m: seen.append(e))
        assert seen == [0, 1]


def test_loss_decreases_over_first_epochs(tmp_path):
    corpus = generate_corpus(tmp_path, num_speakers=8, train_utts=4, heldout_utts=0, duration_s=2.0,
                             num_trials=0, seed=0)
    manifest = DatasetManifest.load(corpus.manifest)
    decreasing = 0
    for seed in range(10):
        cfg = TrainConfig.desk(epochs=5, seed=seed, segment_s=1.0, speakers_per_batch=8)
        h = train(manifest, "var2", cfg, variant="time").history["loss"]
        decreasing += all(b < a for a, b in zip(h, h[1:]))
    assert decreasing >= 9
