import math

import numpy as np
import pytest

import reference as ref
from gpgait import train as tr
from gpgait.autodiff import Tensor
from gpgait.checkpoint import load_container
from gpgait.errors import ConfigError, DataError, NumericError
from gpgait.hot import HotConfig, apply_hot
from gpgait.pagcn import NetworkConfig, init_model, network_forward
from gpgait.synth import CameraSpec, generate_sequence, make_identities

from conftest import walker_frame


def tiny_train_cfg(**kw):
    defaults = dict(subjects_per_batch=2, samples_per_subject=2,
                    sequence_length=6, iterations=5, log_interval=2,
                    checkpoint_interval=0, noise_sigma=1.0, seed=3)
    defaults.update(kw)
    return tr.TrainConfig(**defaults)


def tiny_net_cfg(classes):
    return NetworkConfig(num_classes=classes, parts5_channels=(4,),
                         larger_schemes=("global",), larger_channels=4,
                         embed_dim=4)


def build_train_set(n_ids=3, seqs=2, frames=10, seed=11):
    identities = make_identities(n_ids, seed)
    cam = CameraSpec(jitter_sigma=0.4)
    unified = []
    for i, ident in enumerate(identities):
        for j in range(seqs):
            seq = generate_sequence(ident, cam, frames, seed * 100 + i * 10 + j,
                                    seq_id=f"{ident.identity}-NM-{j:02d}-000")
            unified.append(apply_hot(seq, HotConfig()))
    return tr.TrainSet.build(unified)


class TestSampling:
    def test_shape_and_labels(self, rng):
        ts = build_train_set()
        batch, labels = tr.sample_batch(ts, p=2, k=2, length=4, rng=rng)
        assert batch["joint"].shape == (4, 4, 17, 2)
        assert batch["bone"].shape == (4, 4, 17, 2)
        assert batch["angle"].shape == (4, 4, 17, 1)
        assert len(set(labels.tolist())) == 2

    def test_short_sequence_repeats(self, rng):
        frames = np.stack([walker_frame(0.0), walker_frame(1.0)])
        out = tr.sample_frames(frames, length=5, rng=rng)
        assert out.shape[0] == 5  # only 2 distinct frames available

    def test_no_replacement_when_long_enough(self, rng):
        frames = np.stack([walker_frame(i / 3) for i in range(8)])
        out = tr.sample_frames(frames, length=8, rng=rng)
        # all 8 frames present exactly once, order arbitrary
        assert sorted(out[:, 0, 1].tolist()) == sorted(frames[:, 0, 1].tolist())

    def test_deterministic_under_seed(self):
        ts = build_train_set()
        b1, l1 = tr.sample_batch(ts, 2, 2, 4, np.random.default_rng(9))
        b2, l2 = tr.sample_batch(ts, 2, 2, 4, np.random.default_rng(9))
        np.testing.assert_array_equal(b1["joint"], b2["joint"])
        np.testing.assert_array_equal(l1, l2)

    def test_too_few_subjects(self, rng):
        ts = build_train_set(n_ids=2)
        with pytest.raises(DataError, match="subjects"):
            tr.sample_batch(ts, p=3, k=2, length=4, rng=rng)


class TestAugment:
    def _unified_frames(self):
        seq = apply_hot(
            __import__("conftest").sequence_from_coords(
                [walker_frame(p) for p in (0.2, 0.9)]), HotConfig())
        return seq.frames

    def test_flip_probability_zero(self, rng):
        f = self._unified_frames()
        np.testing.assert_array_equal(tr.augment_flip(f, 0.0, rng), f)

    def test_flip_involution(self, rng):
        f = self._unified_frames()
        twice = tr.augment_flip(tr.augment_flip(f, 1.0, rng), 1.0, rng)
        np.testing.assert_array_equal(twice, f)

    def test_flip_preserves_hot_invariants(self, rng):
        f = self._unified_frames()
        flipped = tr.augment_flip(f, 1.0, rng)
        for frame in flipped:
            neck = (frame[5] + frame[6]) / 2.0
            np.testing.assert_allclose(neck, 0.0, atol=1e-12)
            extent = frame[:, 1].max() - frame[:, 1].min()
            assert extent == pytest.approx(225.0, rel=1e-9)

    def test_noise_probability_zero(self, rng):
        f = self._unified_frames()
        np.testing.assert_array_equal(tr.augment_noise(f, 0.0, 2.0, rng), f)

    def test_noise_sigma_zero(self, rng):
        f = self._unified_frames()
        np.testing.assert_array_equal(tr.augment_noise(f, 0.5, 0.0, rng), f)

    def test_noise_reproducible(self):
        f = self._unified_frames()
        a = tr.augment_noise(f, 0.5, 2.0, np.random.default_rng(4))
        b = tr.augment_noise(f, 0.5, 2.0, np.random.default_rng(4))
        np.testing.assert_array_equal(a, b)


class TestTripletLoss:
    def test_hinge_inactive(self):
        emb = np.array([[0.0], [1.0], [3.0], [4.0]])
        labels = np.array([0, 0, 1, 1])
        # anchor 0: hardest pos 1.0, hardest neg 3.0
        loss = tr.triplet_loss(Tensor(emb), labels, margin=0.2)
        expect = ref.ref_batch_hard_triplet(emb, labels, 0.2)
        assert loss.item() == pytest.approx(expect, abs=1e-12)
        assert loss.item() == 0.0

    def test_hinge_active(self):
        emb = np.array([[0.0], [2.0], [1.0], [9.0]])
        labels = np.array([0, 0, 1, 1])
        loss = tr.triplet_loss(Tensor(emb), labels, margin=0.2)
        expect = ref.ref_batch_hard_triplet(emb, labels, 0.2)
        assert loss.item() == pytest.approx(expect, abs=1e-12)
        assert loss.item() > 0

    def test_brute_force_oracle_100_batches(self, rng):
        for _ in range(100):
            n = int(rng.integers(4, 17))
            emb = rng.normal(size=(n, 5))
            labels = rng.integers(0, max(2, n // 3), size=n)
            if len(np.unique(labels)) < 2:
                labels[0] = labels[0] + 1
            mine = tr.triplet_loss(Tensor(emb), labels, 0.3).item()
            expect = ref.ref_batch_hard_triplet(emb, labels, 0.3)
            assert mine == pytest.approx(expect, rel=1e-9, abs=1e-12)

    def test_translation_invariance(self, rng):
        emb = rng.normal(size=(8, 4))
        labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        a = tr.triplet_loss(Tensor(emb), labels, 0.2).item()
        b = tr.triplet_loss(Tensor(emb + 57.0), labels, 0.2).item()
        assert a == pytest.approx(b, rel=1e-9)

    def test_all_anchors_skipped_warns(self):
        emb = np.array([[0.0], [1.0]])
        labels = np.array([0, 1])  # no positives anywhere
        with pytest.warns(UserWarning, match="no anchor"):
            loss = tr.triplet_loss(Tensor(emb), labels, 0.2)
        assert loss.item() == 0.0

    def test_gradient_flows(self, rng):
        emb = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        labels = np.array([0, 0, 0, 1, 1, 1])
        tr.triplet_loss(emb, labels, 0.5).backward()
        assert emb.grad is not None and np.isfinite(emb.grad).all()


class TestCrossEntropy:
    def test_uniform_two_class(self):
        loss = tr.cross_entropy_loss(Tensor(np.zeros((1, 2))), np.array([0]))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_saturated(self):
        logits = np.array([[1000.0, -1000.0]])
        loss = tr.cross_entropy_loss(Tensor(logits), np.array([0]))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_scalar_oracle(self, rng):
        logits = rng.normal(size=(4, 3))
        labels = np.array([2, 0, 1, 1])
        mine = tr.cross_entropy_loss(Tensor(logits), labels).item()
        assert mine == pytest.approx(ref.ref_cross_entropy(logits, labels),
                                     abs=1e-9)

    def test_constant_shift_invariance(self, rng):
        logits = rng.normal(size=(5, 4))
        labels = np.array([0, 1, 2, 3, 0])
        a = tr.cross_entropy_loss(Tensor(logits), labels).item()
        b = tr.cross_entropy_loss(Tensor(logits + 13.5), labels).item()
        assert a == pytest.approx(b, rel=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            tr.cross_entropy_loss(Tensor(np.zeros((1, 2))), np.array([2]))


class TestCombinedLoss:
    def _parts(self, rng, n_parts=18):
        metrics, logits = [], []
        labels = np.array([0, 0, 1, 1])
        for _ in range(n_parts):
            metrics.append(Tensor(rng.normal(size=(4, 3))))
            logits.append(Tensor(rng.normal(size=(4, 2))))
        return metrics, logits, labels

    def test_gamma_zero(self, rng):
        metrics, logits, labels = self._parts(rng)
        total, tri, _ = tr.combined_loss(metrics, logits, labels, 0.2, 0.0)
        assert total.item() == pytest.approx(tri.item(), abs=1e-12)

    def test_equal_losses_scale(self):
        # engineered so every part produces triplet = ce = c
        metrics = [Tensor(np.array([[0.0], [2.0], [1.0], [9.0]]))] * 18
        labels = np.array([0, 0, 1, 1])
        logits = [Tensor(np.zeros((4, 2)))] * 18
        gamma = 0.7
        total, tri, ce = tr.combined_loss(metrics, logits, labels, 0.2, gamma)
        assert total.item() == pytest.approx(tri.item() + gamma * ce.item(),
                                             abs=1e-12)

    def test_hand_sum(self, rng):
        metrics, logits, labels = self._parts(rng)
        gamma = 1.3
        total, _, _ = tr.combined_loss(metrics, logits, labels, 0.2, gamma)
        parts = []
        for m, l in zip(metrics, logits):
            parts.append(ref.ref_batch_hard_triplet(m.data, labels, 0.2)
                         + gamma * ref.ref_cross_entropy(l.data, labels))
        assert total.item() == pytest.approx(sum(parts) / 18, abs=1e-12)


class TestAdam:
    def test_first_step_magnitude(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([1.0])
        state = tr.OptimizerState()
        tr.adam_step({"w": p}, state, lr=0.01)
        assert p.data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_zero_gradient_no_move(self):
        p = Tensor(np.array([5.0]), requires_grad=True)
        p.grad = np.array([0.0])
        state = tr.OptimizerState()
        tr.adam_step({"w": p}, state, lr=0.1)
        assert p.data[0] == 5.0
        assert state.step == 1

    def test_two_step_recurrence(self):
        g = 0.7
        lr = 0.05
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = tr.OptimizerState()
        for _ in range(2):
            p.grad = np.array([g])
            tr.adam_step({"w": p}, state, lr)
        # hand-computed recurrence
        b1, b2, eps = 0.9, 0.999, 1e-8
        m = v = 0.0
        x = 1.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1 ** t)
            vh = v / (1 - b2 ** t)
            x -= lr * mh / (math.sqrt(vh) + eps)
        assert p.data[0] == pytest.approx(x, abs=1e-12)

    def test_nonfinite_gradient_names_tensor(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(NumericError, match="spooky"):
            tr.adam_step({"spooky": p}, tr.OptimizerState(), 0.1)


class TestSchedule:
    def test_endpoints_exact(self):
        total = 101
        assert tr.one_cycle_lr(0, total, 1e-5, 1e-3, 1e-8) == 1e-5
        assert tr.one_cycle_lr(30, total, 1e-5, 1e-3, 1e-8) == 1e-3
        assert tr.one_cycle_lr(100, total, 1e-5, 1e-3, 1e-8) == 1e-8

    def test_phase2_end_returns_to_init(self):
        assert tr.one_cycle_lr(90, 101, 1e-5, 1e-3, 1e-8) == pytest.approx(
            1e-5, rel=1e-12)

    def test_continuity_at_boundaries(self):
        # continuity proper: the two phase formulas agree at the shared
        # progress point within 1e-12 relative
        lr_init, lr_max, lr_final = 1e-5, 1e-3, 1e-8
        warmup_end = tr.one_cycle_lr(30, 101, lr_init, lr_max, lr_final)
        w0 = 0.5 * (1.0 + math.cos(0.0))
        cosine_start = lr_max * w0 + lr_init * (1.0 - w0)
        assert abs(cosine_start - warmup_end) <= 1e-12 * warmup_end
        cosine_end = tr.one_cycle_lr(90, 101, lr_init, lr_max, lr_final)
        tail_start = lr_init * 1.0 + lr_final * 0.0
        assert abs(cosine_end - tail_start) <= 1e-12 * tail_start
        # and no step-to-step jump anywhere near the boundaries
        total = 100000
        for boundary in (0.3, 0.9):
            i = int(boundary * (total - 1))
            before = tr.one_cycle_lr(i, total, lr_init, lr_max, lr_final)
            after = tr.one_cycle_lr(i + 1, total, lr_init, lr_max, lr_final)
            assert abs(after - before) / before < 1e-3

    def test_monotone_warmup(self):
        vals = [tr.one_cycle_lr(i, 101, 1e-5, 1e-3, 1e-8) for i in range(31)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            tr.one_cycle_lr(101, 101, 1e-5, 1e-3, 1e-8)
        with pytest.raises(ConfigError):
            tr.one_cycle_lr(-1, 101, 1e-5, 1e-3, 1e-8)


class TestGradientFlow:
    def test_every_parameter_reached(self, rng):
        """Backward from the combined loss touches every trainable
        tensor (BN shift included via nonzero beta paths)."""
        ts = build_train_set()
        net_cfg = tiny_net_cfg(ts.num_classes)
        model = init_model(net_cfg, seed=1)
        batch, labels = tr.sample_batch(ts, 2, 2, 4, rng)
        from gpgait.pagcn import descriptor_inputs
        res = network_forward(model, descriptor_inputs(
            net_cfg, batch["joint"], batch["bone"], batch["angle"]),
            training=True, update_stats=False)
        total, _, _ = tr.combined_loss(res.metrics, res.logits, labels, 0.2, 1.0)
        total.backward()
        for name, p in model.named_parameters().items():
            assert p.grad is not None, f"no gradient for {name}"
            assert np.isfinite(p.grad).all(), f"non-finite gradient for {name}"


class TestTrainLoop:
    def test_smoke_and_checkpoint_roundtrip(self, tmp_path):
        ts = build_train_set()
        model, final = tr.train_loop(
            ts, tiny_net_cfg(ts.num_classes),
            tiny_train_cfg(iterations=6, checkpoint_interval=3),
            tmp_path / "run")
        config, tensors = load_container(final)
        assert config["train"]["iterations"] == 6
        # losses were finite (loop would have aborted otherwise) and the
        # metrics log exists with parseable lines
        lines = (tmp_path / "run" / "metrics.log").read_text().splitlines()
        assert lines and all("total" in ln for ln in lines)
        # round trip: what was written reads back as float32-exact copies
        for name, t in model.named_parameters().items():
            np.testing.assert_array_equal(
                tensors[name], t.data.astype(np.float32).astype(np.float64))
        assert int(tensors["train/step"][0]) == 6

    def test_bit_identical_reruns(self, tmp_path):
        ts = build_train_set()
        paths = []
        for run in ("a", "b"):
            _, final = tr.train_loop(
                ts, tiny_net_cfg(ts.num_classes), tiny_train_cfg(iterations=5),
                tmp_path / run)
            paths.append(final)
        b1 = open(paths[0], "rb").read()
        b2 = open(paths[1], "rb").read()
        assert b1 == b2

    def test_resume_continues_counter(self, tmp_path):
        ts = build_train_set()
        cfg = tiny_train_cfg(iterations=4)
        model, final = tr.train_loop(ts, tiny_net_cfg(ts.num_classes), cfg,
                                     tmp_path / "r1")
        _, tensors = load_container(final)
        model2 = init_model(tiny_net_cfg(ts.num_classes), seed=cfg.seed)
        state = tr.restore_training_state(model2, tensors)
        assert state.step == 4
        cfg2 = tiny_train_cfg(iterations=6)
        _, final2 = tr.train_loop(ts, tiny_net_cfg(ts.num_classes), cfg2,
                                  tmp_path / "r2", model=model2, state=state,
                                  start_iteration=state.step)
        _, t2 = load_container(final2)
        assert int(t2["train/step"][0]) == 6
