"""Feature probing, linear classification, fusion, and generation metrics."""

import numpy as np
import pytest
import torch

from flowtex import synthdata
from flowtex.networks import ArchConfig, build_networks
from flowtex.evaluation import (
    FeatureRecord, window_offsets, extract_features,
    train_linear_classifier, classify_stream, fuse_and_classify, split_ids,
    motion_energy, warp_consistency, evaluate_representation, write_report,
)
from flowtex.synthdata import (
    SceneSpec, MotionSpec, BackgroundSpec, DatasetConfig, SyntheticDataset,
)

MICRO = ArchConfig(n_levels=2, base_channels=8, video_shape=(32, 16, 16))
FLAT_BG = BackgroundSpec(kind="flat", color=(-0.5, -0.5, -0.5))


class _StubDisc:
    """Duck-typed discriminator that records the windows it was fed and
    returns the window mean as a 2-vector feature."""

    def __init__(self, arch):
        self.arch = arch
        self.calls = []

    def eval(self):
        return self

    def __call__(self, *volumes):
        window = volumes[0]
        self.calls.append(window.clone())
        feats = torch.stack([window.mean(dim=(1, 2, 3, 4)), window.std(dim=(1, 2, 3, 4))], dim=1)
        return torch.zeros(window.shape[0]), feats


def _clip(t_frames, seed=0, hw=16):
    rng = np.random.default_rng(seed)
    video = rng.uniform(-1, 1, (t_frames, hw, hw, 3)).astype(np.float32)
    flow = rng.uniform(-4, 4, (t_frames, hw, hw, 2)).astype(np.float32)
    return video, flow


class TestWindowAccounting:
    def test_exact_window_single_offset(self):
        assert window_offsets(32) == [0]

    def test_48_frames_two_offsets(self):
        assert window_offsets(48) == [0, 16]

    def test_count_formula(self):
        for t in range(32, 200, 7):
            assert len(window_offsets(t)) == (t - 32) // 16 + 1

    def test_short_clip_rejected(self):
        with pytest.raises(ValueError, match="shorter"):
            window_offsets(31)


class TestExtractFeatures:
    def test_single_window_equals_window_activation(self):
        video, flow = _clip(32)
        stub = _StubDisc(MICRO)
        rec, _ = extract_features(video, flow, (stub, None), clip_id=3, label=1)
        assert len(stub.calls) == 1
        assert rec.clip_id == 3 and rec.label == 1 and rec.stream == "flow"
        np.testing.assert_allclose(rec.vector,
                                   [stub.calls[0].mean().item(), stub.calls[0].std().item()],
                                   rtol=1e-6)

    def test_windows_at_stride_16(self):
        video, flow = _clip(48)
        stub = _StubDisc(MICRO)
        extract_features(video, flow, (stub, None))
        assert len(stub.calls) == 2
        flow_t = np.moveaxis(flow, -1, 0)
        np.testing.assert_allclose(stub.calls[0][0].numpy(), flow_t[:, 0:32], rtol=1e-6)
        np.testing.assert_allclose(stub.calls[1][0].numpy(), flow_t[:, 16:48], rtol=1e-6)

    def test_duplicated_clip_average_unchanged(self):
        # looping a 32-frame clip to 64 frames yields windows {0, 16, 32};
        # windows 0 and 32 are identical by construction, and for a clip that
        # is 16-periodic all three agree, leaving the average unchanged
        video, flow = _clip(16)
        video = np.concatenate([video] * 4, axis=0)  # 64 frames, period 16
        flow = np.concatenate([flow] * 4, axis=0)
        stub = _StubDisc(MICRO)
        rec64, _ = extract_features(video, flow, (stub, None))
        assert len(stub.calls) == 3
        assert torch.equal(stub.calls[0], stub.calls[2])
        stub32 = _StubDisc(MICRO)
        rec32, _ = extract_features(video[:32], flow[:32], (stub32, None))
        np.testing.assert_allclose(rec64.vector, rec32.vector, rtol=1e-6)

    def test_real_discriminators_deterministic(self):
        nets = build_networks(MICRO, seed=0)
        video, flow = _clip(32)
        discs = (nets["flow_discriminator"], nets["texture_discriminator"])
        a = extract_features(video, flow, discs)
        b = extract_features(video, flow, discs)
        np.testing.assert_array_equal(a[0].vector, b[0].vector)
        np.testing.assert_array_equal(a[1].vector, b[1].vector)
        assert a[0].vector.shape == (MICRO.feature_dim,)

    def test_center_crop_applied(self):
        nets = build_networks(MICRO, seed=0)
        video, flow = _clip(32, hw=20)
        rec, _ = extract_features(video, flow, (nets["flow_discriminator"], None))
        assert rec.vector.shape == (MICRO.feature_dim,)


def _blob_features(rng, n, d, centers, labels):
    x = np.concatenate([rng.normal(centers[l], 0.3, size=(1, d)) for l in labels])
    return x


class TestLinearClassifier:
    def test_separable_data_fits_exactly(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(-3, 0.2, (30, 4)), rng.normal(3, 0.2, (30, 4))])
        y = np.array([0] * 30 + [1] * 30)
        clf = train_linear_classifier(x, y, seed=0)
        assert clf.score(x, y) == 1.0

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 1, (300, 8))
        y = rng.integers(0, 3, 300)
        train = np.arange(200)
        test = np.arange(200, 300)
        clf = train_linear_classifier(x[train], y[train], seed=0)
        acc = clf.score(x[test], y[test])
        sigma = np.sqrt((1 / 3) * (2 / 3) / 100)
        assert abs(acc - 1 / 3) <= 3 * sigma

    def test_duplicated_feature_dimension_same_predictions(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([rng.normal(-2, 0.5, (40, 6)), rng.normal(2, 0.5, (40, 6))])
        y = np.array([0] * 40 + [1] * 40)
        clf_a = train_linear_classifier(x, y, seed=0)
        clf_b = train_linear_classifier(np.concatenate([x, x], axis=1), y, seed=0)
        np.testing.assert_array_equal(clf_a.predict(x), clf_b.predict(np.concatenate([x, x], axis=1)))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="2 classes"):
            train_linear_classifier(np.zeros((5, 3)), np.zeros(5))

    def test_deterministic_weights(self):
        rng = np.random.default_rng(3)
        x = rng.normal(0, 1, (60, 5))
        y = rng.integers(0, 2, 60)
        a = train_linear_classifier(x, y, seed=4)
        b = train_linear_classifier(x, y, seed=4)
        lin_a = a.named_steps["logisticregression"]
        lin_b = b.named_steps["logisticregression"]
        np.testing.assert_array_equal(lin_a.coef_, lin_b.coef_)
        np.testing.assert_array_equal(lin_a.intercept_, lin_b.intercept_)


def _records(stream, vectors, labels):
    return [FeatureRecord(clip_id=i, stream=stream, vector=np.asarray(v), label=int(l))
            for i, (v, l) in enumerate(zip(vectors, labels))]


class TestFusion:
    def _two_stream_data(self, seed=0, n=120, complementary=False):
        rng = np.random.default_rng(seed)
        if complementary:
            # 4 classes = 2 label bits; each stream encodes exactly one bit
            labels = rng.integers(0, 4, n)
            bit0, bit1 = labels % 2, labels // 2
            f = rng.normal(0, 0.3, (n, 4)) + np.outer(bit0 * 4 - 2, np.ones(4))
            t = rng.normal(0, 0.3, (n, 4)) + np.outer(bit1 * 4 - 2, np.ones(4))
        else:
            labels = rng.integers(0, 3, n)
            f = rng.normal(0, 0.4, (n, 4)) + np.outer(labels, np.ones(4))
            t = rng.normal(0, 0.4, (n, 4)) + np.outer(labels, -np.ones(4))
        return _records("flow", f, labels), _records("texture", t, labels), labels

    def test_zero_stream_matches_other_stream(self):
        flow, tex, labels = self._two_stream_data(seed=5)
        zeros = _records("texture", np.zeros((len(labels), 4)), labels)
        train, test = split_ids(labels, 0.25, seed=0)
        solo, _ = classify_stream(flow, train, test, seed=0)
        fused, _ = fuse_and_classify(flow, zeros, train, test, seed=0)
        assert fused == pytest.approx(solo, abs=1e-9)

    def test_duplicated_stream_matches_single(self):
        flow, _, labels = self._two_stream_data(seed=6)
        dup = [FeatureRecord(r.clip_id, "texture", r.vector.copy(), r.label) for r in flow]
        train, test = split_ids(labels, 0.25, seed=0)
        solo, _ = classify_stream(flow, train, test, seed=0)
        fused, _ = fuse_and_classify(flow, dup, train, test, seed=0)
        assert fused == pytest.approx(solo, abs=1e-9)

    def test_complementary_streams_fuse_better(self):
        flow, tex, labels = self._two_stream_data(seed=7, complementary=True)
        train, test = split_ids(labels, 0.25, seed=0)
        acc_f, _ = classify_stream(flow, train, test, seed=0)
        acc_t, _ = classify_stream(tex, train, test, seed=0)
        fused, _ = fuse_and_classify(flow, tex, train, test, seed=0)
        assert fused > max(acc_f, acc_t)
        assert fused > 0.9 and max(acc_f, acc_t) < 0.7

    def test_misaligned_ids_rejected(self):
        flow, tex, labels = self._two_stream_data(seed=8)
        with pytest.raises(ValueError, match="clip ids"):
            fuse_and_classify(flow, tex[:-1], *split_ids(labels, 0.25, 0))

    def test_score_average_mode(self):
        flow, tex, labels = self._two_stream_data(seed=9)
        train, test = split_ids(labels, 0.25, seed=0)
        acc, conf = fuse_and_classify(flow, tex, train, test, fusion="score_average", seed=0)
        assert 0.0 <= acc <= 1.0
        assert sum(sum(row) for row in conf) == len(test)


class TestSplit:
    def test_stratified_and_deterministic(self):
        labels = [0] * 20 + [1] * 20 + [2] * 20
        train_a, test_a = split_ids(labels, 0.25, seed=3)
        train_b, test_b = split_ids(labels, 0.25, seed=3)
        assert train_a == train_b and test_a == test_b
        assert len(test_a) == 15
        test_labels = [labels[i] for i in test_a]
        assert all(test_labels.count(c) == 5 for c in (0, 1, 2))


class TestMotionEnergy:
    def test_static_video_is_zero(self):
        video = np.broadcast_to(np.linspace(-1, 1, 48).reshape(4, 4, 3), (5, 4, 4, 3)).copy()
        assert motion_energy(video) == 0.0

    def test_alternating_frames(self):
        video = np.empty((4, 2, 2, 3))
        video[0::2], video[1::2] = 1.0, -1.0
        assert motion_energy(video) == 2.0

    def test_static_background_region_contributes_zero(self):
        spec = SceneSpec("square", 8, (1.0, 0.0, 0.0), FLAT_BG,
                         MotionSpec("linear", velocity=(1.0, 0.0)),
                         start=(10.0, 38.0), n_frames=32, canvas=(76, 76))
        sample = synthdata.render_scene(spec)
        never_shape = np.ones((76, 76), dtype=bool)
        for t in range(32):
            never_shape &= ~synthdata.shape_mask(spec, t)
        diffs = np.abs(np.diff(sample.video, axis=0))
        assert diffs[:, never_shape].max() == 0.0
        assert motion_energy(sample.video) > 0.0


class TestWarpConsistency:
    def test_ground_truth_integer_pair_is_zero(self):
        spec = SceneSpec("square", 10, (1.0, 0.0, 0.0), FLAT_BG,
                         MotionSpec("linear", velocity=(2.0, 1.0)),
                         start=(7.0, 7.0), n_frames=32, canvas=(76, 76))
        sample = synthdata.render_scene(spec)
        assert warp_consistency(sample.video, sample.flow) <= 1e-6

    def test_zero_flow_collapses_to_motion_energy(self):
        spec = SceneSpec("square", 10, (1.0, 0.0, 0.0), FLAT_BG,
                         MotionSpec("linear", velocity=(1.0, 0.0)),
                         start=(7.0, 38.0), n_frames=32, canvas=(76, 76))
        sample = synthdata.render_scene(spec)
        zero_flow = np.zeros_like(sample.flow)
        assert warp_consistency(sample.video, zero_flow) == pytest.approx(
            motion_energy(sample.video), rel=1e-12)

    def test_random_flow_on_static_video_positive(self):
        rng = np.random.default_rng(0)
        video = np.broadcast_to(rng.uniform(-1, 1, (8, 8, 3)), (6, 8, 8, 3)).copy()
        flow = rng.uniform(-2, 2, (6, 8, 8, 2))
        assert warp_consistency(video, flow) > 0.0


@pytest.fixture(scope="module")
def tiny_probe():
    cfg = DatasetConfig(clips_per_class=4, canvas=(20, 20), n_frames=32,
                        size_min=5, size_max=8, speed_min=0.3, speed_max=0.5)
    ds = SyntheticDataset.generate(cfg, seed=2)
    nets = build_networks(MICRO, seed=1)
    return ds, nets


class TestEvaluateRepresentation:
    def test_report_contract(self, tiny_probe, tmp_path):
        ds, nets = tiny_probe
        report = evaluate_representation(ds, nets["flow_discriminator"],
                                         nets["texture_discriminator"], test_fraction=0.25)
        assert report.chance == pytest.approx(1.0 / 3.0)
        for acc in (report.flow_accuracy, report.texture_accuracy, report.fused_accuracy):
            assert 0.0 <= acc <= 1.0
        assert report.n_train + report.n_test == len(ds)
        assert sum(sum(r) for r in report.confusion_flow) == report.n_test
        path = write_report(report, tmp_path)
        assert path.exists()
        assert (tmp_path / "confusion_fused.csv").exists()

    def test_probe_is_deterministic(self, tiny_probe):
        ds, nets = tiny_probe
        a = evaluate_representation(ds, nets["flow_discriminator"], nets["texture_discriminator"])
        b = evaluate_representation(ds, nets["flow_discriminator"], nets["texture_discriminator"])
        assert a.flow_accuracy == b.flow_accuracy
        assert a.fused_accuracy == b.fused_accuracy
