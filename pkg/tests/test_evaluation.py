"""Confusion-matrix metrics, tri-map bands, and multi-scale max fusion."""

import numpy as np
import pytest

from lapseg.evaluation import ConfusionMatrix, metrics, multiscale_predict, \
    trimap_band, trimap_curve
from lapseg.ops import softmax_channels
from lapseg.reference import metrics_naive
from lapseg.rng import Stream


class TestConfusionMatrix:
    def test_perfect_prediction_diagonal(self):
        t = Stream(0, "cm").randint(0, 4, (8, 8)).astype(np.uint8)
        cm = ConfusionMatrix(4).accumulate(t, t)
        off = cm.counts - np.diag(np.diag(cm.counts))
        assert not off.any()
        m = metrics(cm)
        assert m.pixel_acc == 1.0 and m.mean_iou == 1.0 and m.mean_class_acc == 1.0

    def test_empty_region_no_update(self):
        t = np.zeros((4, 4), dtype=np.uint8)
        cm = ConfusionMatrix(2).accumulate(t, t, region=np.zeros((4, 4), bool))
        assert not cm.counts.any()

    def test_hand_tally(self):
        truth = np.array([[0, 0, 1, 1], [2, 2, 1, 0]], dtype=np.uint8)
        pred = np.array([[0, 1, 1, 1], [2, 0, 0, 0]], dtype=np.uint8)
        cm = ConfusionMatrix(3).accumulate(pred, truth)
        want = np.array([[2, 1, 0], [1, 2, 0], [1, 0, 1]])
        np.testing.assert_array_equal(cm.counts, want)

    def test_void_skipped(self):
        truth = np.array([[255, 0]], dtype=np.uint8)
        pred = np.array([[1, 0]], dtype=np.uint8)
        cm = ConfusionMatrix(2).accumulate(pred, truth)
        assert cm.counts.sum() == 1

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.array([[5]], np.uint8),
                                          np.array([[0]], np.uint8))

    def test_disjoint_prediction_zero_iou(self):
        truth = np.zeros((4, 4), dtype=np.uint8)
        truth[:2] = 1
        pred = 1 - truth
        m = metrics(ConfusionMatrix(2).accumulate(pred, truth))
        assert m.per_class_iou[0] == 0.0 and m.per_class_iou[1] == 0.0

    def test_zero_union_classes_excluded(self):
        truth = np.zeros((4, 4), dtype=np.uint8)
        m = metrics(ConfusionMatrix(3).accumulate(truth, truth))
        assert m.evaluated.tolist() == [True, False, False]
        assert m.mean_iou == 1.0
        assert np.isnan(m.per_class_iou[1])

    def test_empty_matrix_errors(self):
        with pytest.raises(ValueError):
            metrics(ConfusionMatrix(2))

    def test_matches_set_arithmetic_oracle(self):
        st = Stream(1, "oracle")
        for i in range(100):
            h = 2 + st.randint(0, 15)
            w = 2 + st.randint(0, 15)
            pred = st.randint(0, 4, (h, w)).astype(np.uint8)
            truth = st.randint(0, 4, (h, w)).astype(np.uint8)
            truth[st.uniform((h, w)) > 0.9] = 255
            if (truth == 255).all():
                continue
            m = metrics(ConfusionMatrix(4).accumulate(pred, truth))
            pa, ma, miou = metrics_naive(pred, truth, 4)
            assert m.pixel_acc == pa
            assert m.mean_iou == miou
            assert m.mean_class_acc == ma


class TestTrimapBand:
    def test_uniform_truth_empty_band(self):
        t = np.full((16, 16), 2, dtype=np.uint8)
        for r in (1, 3, 8):
            assert not trimap_band(t, r).any()

    def test_vertical_step_band_width(self):
        t = np.zeros((16, 16), dtype=np.uint8)
        c = 7
        t[:, c + 1:] = 1
        for r in (1, 2, 4):
            band = trimap_band(t, r)
            cols = np.arange(16)
            want = (cols >= c - r + 1) & (cols <= c + r)
            np.testing.assert_array_equal(band, np.broadcast_to(want, (16, 16)))
            assert band[0].sum() == 2 * r

    def test_monotone_in_radius(self):
        st = Stream(2, "mono")
        t = st.randint(0, 3, (20, 20)).astype(np.uint8)
        prev = trimap_band(t, 1)
        for r in range(2, 6):
            cur = trimap_band(t, r)
            assert (prev <= cur).all()
            prev = cur

    def test_label_swap_symmetric(self):
        t = np.zeros((12, 12), dtype=np.uint8)
        t[:, 6:] = 1
        np.testing.assert_array_equal(trimap_band(t, 3), trimap_band(1 - t, 3))

    def test_void_not_boundary(self):
        t = np.zeros((8, 8), dtype=np.uint8)
        t[:, 4:] = 255
        assert not trimap_band(t, 2).any()

    def test_radius_validation(self):
        with pytest.raises(ValueError):
            trimap_band(np.zeros((4, 4), np.uint8), 0)

    def test_curve_composition(self):
        st = Stream(3, "curve")
        truth = st.randint(0, 3, (24, 24)).astype(np.uint8)
        pred = st.randint(0, 3, (24, 24)).astype(np.uint8)
        rows = trimap_curve(pred, truth, [1, 3, 5], num_classes=3)
        for r, miou, pa in rows:
            cm = ConfusionMatrix(3).accumulate(pred, truth, region=trimap_band(truth, r))
            m = metrics(cm)
            assert miou == m.mean_iou and pa == m.pixel_acc

    def test_curve_perfect_prediction(self):
        t = np.zeros((16, 16), dtype=np.uint8)
        t[:, 8:] = 1
        rows = trimap_curve(t, t, [1, 2, 4], num_classes=2)
        for _, miou, _ in rows:
            assert miou == 1.0

    def test_shifted_prediction_concentrates_errors_at_boundary(self):
        t = np.zeros((32, 32), dtype=np.uint8)
        t[:, 16:] = 1
        pred = np.zeros_like(t)
        pred[:, 17:] = 1          # one-pixel shift
        rows = dict((r, miou) for r, miou, _ in
                    trimap_curve(pred, t, [1, 8], num_classes=2))
        assert rows[1] < rows[8]


class TestMultiscale:
    def _forward(self, scores_at):
        def fn(batch):
            n, c, h, w = batch.shape
            st = Stream(4, "ms", h, w)
            return (st.uniform((n, 3, h, w)) * 4 - 2).astype(batch.dtype)
        return fn

    def test_single_scale_identity(self):
        st = Stream(5, "img")
        image = st.uniform((3, 64, 64))
        fn = self._forward(None)
        probs = multiscale_predict(fn, image, scales=[1.0])
        direct = softmax_channels(fn(image[None]))[0]
        np.testing.assert_array_equal(probs, direct)

    def test_duplicate_scale_idempotent(self):
        st = Stream(6, "img2")
        image = st.uniform((3, 64, 64))
        fn = self._forward(None)
        a = multiscale_predict(fn, image, scales=[1.0])
        b = multiscale_predict(fn, image, scales=[1.0, 1.0])
        np.testing.assert_array_equal(a, b)

    def test_fused_dominates_each_scale(self):
        st = Stream(7, "img3")
        image = st.uniform((3, 64, 64))
        fn = self._forward(None)
        fused = multiscale_predict(fn, image, scales=[1.0, 0.8, 0.6])
        for s in (1.0, 0.8, 0.6):
            single = multiscale_predict(fn, image, scales=[s])
            assert (fused >= single - 1e-12).all()

    def test_permutation_invariant(self):
        st = Stream(8, "img4")
        image = st.uniform((3, 64, 64))
        fn = self._forward(None)
        a = multiscale_predict(fn, image, scales=[1.0, 0.8, 0.6])
        b = multiscale_predict(fn, image, scales=[0.6, 1.0, 0.8])
        np.testing.assert_array_equal(a, b)

    def test_tiny_scale_rejected(self):
        image = np.zeros((3, 64, 64))
        with pytest.raises(ValueError):
            multiscale_predict(self._forward(None), image, scales=[0.1])

    def test_snapped_extents_multiple_of_32(self):
        seen = []

        def fn(batch):
            seen.append(batch.shape[2:])
            n, c, h, w = batch.shape
            return np.zeros((n, 2, h, w))

        image = np.zeros((3, 96, 96))
        multiscale_predict(fn, image, scales=[1.0, 0.8, 0.6])
        assert seen == [(96, 96), (64, 64), (64, 64)]
        for h, w in seen:
            assert h % 32 == 0 and w % 32 == 0
