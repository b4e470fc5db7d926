import math

import numpy as np
import pytest

from featflow import losses
from featflow.detector import Keypoint
from featflow.losses import (
    CorrespondenceSet,
    EmptyPairingError,
    LossWeights,
    ProjectionError,
    keypoint_loss,
    line_peaky_components,
    line_peaky_loss,
    match_probability_exp,
    match_probability_softmax,
    mnre_loss,
    nre_loss,
    peaky_loss,
    project,
    reliability_loss,
    reprojection_loss,
    similarity_map,
)


def kp(x, y, score=0.5):
    return Keypoint(float(x), float(y), float(score))


def unit_maps(rng, h, w, dim):
    """Random per-pixel unit descriptor map."""
    m = rng.standard_normal((h, w, dim))
    m /= np.linalg.norm(m, axis=2, keepdims=True)
    return m.astype(np.float32)


def bilinear_oracle(arr, x, y):
    """Independent scalar bilinear interpolation (float64)."""
    h, w = arr.shape[:2]
    x0 = min(int(math.floor(x)), w - 2) if w > 1 else 0
    y0 = min(int(math.floor(y)), h - 2) if h > 1 else 0
    fx, fy = x - x0, y - y0
    return (
        (1 - fy) * (1 - fx) * float(arr[y0, x0])
        + (1 - fy) * fx * float(arr[y0, min(x0 + 1, w - 1)])
        + fy * (1 - fx) * float(arr[min(y0 + 1, h - 1), x0])
        + fy * fx * float(arr[min(y0 + 1, h - 1), min(x0 + 1, w - 1)])
    )


class TestProject:
    def test_identity(self):
        assert project((3.5, 2.0), np.eye(3)) == (3.5, 2.0)

    def test_translation(self):
        hm = np.array([[1, 0, 4.0], [0, 1, -2.5], [0, 0, 1]])
        assert project((1.0, 1.0), hm) == (5.0, -1.5)

    def test_matches_hand_multiply(self, rng):
        hm = np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3))
        x, y = 3.2, 7.7
        v = hm @ np.array([x, y, 1.0])
        want = (v[0] / v[2], v[1] / v[2])
        got = project((x, y), hm)
        assert got[0] == pytest.approx(want[0], abs=1e-12)
        assert got[1] == pytest.approx(want[1], abs=1e-12)

    def test_infinity_signaled(self):
        hm = np.array([[1, 0, 0], [0, 1, 0], [0, -1, 1.0]])
        with pytest.raises(ProjectionError):
            project((0.0, 1.0), hm)  # w = 1 - y = 0


class TestReprojectionLoss:
    def test_identical_sets_zero(self):
        pts = (kp(3, 4), kp(10, 12), kp(20, 7))
        corr = CorrespondenceSet(np.eye(3), pts, pts)
        assert reprojection_loss(corr) == pytest.approx(0.0, abs=1e-12)

    def test_single_pair_offset_one(self):
        corr = CorrespondenceSet(np.eye(3), (kp(5, 5),), (kp(6, 5),))
        assert reprojection_loss(corr) == pytest.approx(2.0, abs=1e-9)

    def test_matches_nearest_neighbor_oracle(self, rng):
        hm = np.array([[1, 0, 2.0], [0, 1, -1.0], [0, 0, 1]])
        pts_a = tuple(kp(x, y) for x, y in rng.uniform(5, 25, (12, 2)))
        pts_b = tuple(kp(x, y) for x, y in rng.uniform(5, 25, (9, 2)))
        corr = CorrespondenceSet(hm, pts_a, pts_b)
        radius = 3.0

        def direction(points_src, points_dst, matrix):
            dists = []
            for p in points_src:
                v = matrix @ np.array([p.x, p.y, 1.0])
                qx, qy = v[0] / v[2], v[1] / v[2]
                best = min(
                    math.hypot(q.x - qx, q.y - qy) for q in points_dst
                )
                if best <= radius:
                    dists.append(best)
            return dists

        fwd = direction(pts_a, pts_b, hm)
        bwd = direction(pts_b, pts_a, np.linalg.inv(hm))
        want = sum(fwd) / len(fwd) + sum(bwd) / len(bwd)
        assert reprojection_loss(corr, radius) == pytest.approx(want, rel=1e-12)

    def test_no_pairs_is_error(self):
        corr = CorrespondenceSet(np.eye(3), (kp(0, 0),), (kp(50, 50),))
        with pytest.raises(EmptyPairingError):
            reprojection_loss(corr)


class TestPeakyLoss:
    def test_impulse_at_keypoint_zero(self):
        s = np.zeros((9, 9, 1), np.float32)
        s[4, 4, 0] = 1.0
        assert peaky_loss(s, kp(4, 4), 3) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_3x3_hand_value(self):
        # 8 neighbors at distances 1 (x4) and sqrt(2) (x4); center distance 0
        s = np.ones((7, 7, 1), np.float32)
        want = (4 * 1.0 + 4 * math.sqrt(2.0)) / 9.0
        assert peaky_loss(s, kp(3, 3), 3) == pytest.approx(want, rel=1e-12)

    def test_linear_in_scale(self, rng):
        s = rng.random((11, 11, 1)).astype(np.float32)
        base = peaky_loss(s, kp(5, 5), 5)
        scaled = peaky_loss((s * np.float32(0.3)), kp(5, 5), 5)
        assert scaled == pytest.approx(0.3 * base, rel=1e-5)

    def test_patch_outside_signaled(self):
        s = np.ones((6, 6, 1), np.float32)
        with pytest.raises(ValueError):
            peaky_loss(s, kp(1, 1), 5)


class TestLinePeakyLoss:
    def test_impulse_zero(self):
        s = np.zeros((9, 9, 1), np.float32)
        s[4, 4, 0] = 1.0
        assert line_peaky_loss(s, kp(4, 4), 5) == pytest.approx(0.0, abs=1e-12)

    def test_horizontal_line_selects_horizontal_pattern(self):
        s = np.zeros((9, 9, 1), np.float32)
        s[4, 2:7, 0] = 1.0  # horizontal line through (4, 4)
        comps = line_peaky_components(s, kp(4, 4), 5)
        assert losses.LINE_PATTERNS[int(np.argmax(comps))] == "horizontal"
        assert line_peaky_loss(s, kp(4, 4), 5) == pytest.approx(comps[1], rel=1e-12)

    def test_symmetric_cross_patterns_equal(self):
        s = np.zeros((9, 9, 1), np.float32)
        s[4, 2:7, 0] = 1.0
        s[2:7, 4, 0] = 1.0
        comps = line_peaky_components(s, kp(4, 4), 5)
        assert comps[0] == pytest.approx(comps[1], abs=1e-6)

    def test_matches_explicit_formula(self, rng):
        s = rng.random((11, 11, 1)).astype(np.float32)
        p = kp(5, 5)
        n, sigma = 5, 1.0
        vals = [0.0, 0.0, 0.0, 0.0]
        for y in range(3, 8):
            for x in range(3, 8):
                sc = float(s[y, x, 0])
                d = math.hypot(x - p.x, y - p.y)
                dist = [
                    abs(x - p.x),
                    abs(y - p.y),
                    abs(x + y - p.x - p.y),
                    abs(x - y - p.x + p.y),
                ]
                for i, dd in enumerate(dist):
                    w = math.exp(-dd * dd / (2 * sigma * sigma))
                    vals[i] += w * d * sc
        want = max(v / (n * n) for v in vals)
        assert line_peaky_loss(s, p, n, sigma) == pytest.approx(want, rel=1e-9)


class TestSimilarity:
    def test_matching_descriptor_one(self):
        m = np.zeros((3, 3, 4), np.float32)
        m[:, :, 0] = 1.0
        d = np.array([1.0, 0, 0, 0])
        assert similarity_map(d, m)[1, 1, 0] == pytest.approx(1.0)

    def test_orthogonal_zero(self):
        m = np.zeros((2, 2, 2), np.float32)
        m[:, :, 0] = 1.0
        d = np.array([0.0, 1.0])
        assert not similarity_map(d, m).any()

    def test_matches_dot_oracle(self, rng):
        m = unit_maps(rng, 5, 6, 3)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        sim = similarity_map(d, m)
        for y in range(5):
            for x in range(6):
                want = float(np.dot(m[y, x].astype(np.float64), d))
                assert sim[y, x, 0] == pytest.approx(want, abs=1e-6)

    def test_dim_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="dim"):
            similarity_map(np.ones(4), unit_maps(rng, 3, 3, 3))


class TestMatchProbabilityExp:
    def test_values(self):
        sim = np.array([[[1.0]], [[1.0 - 0.02]], [[0.9]]])
        out = match_probability_exp(sim, 0.02)
        assert out[0, 0, 0] == pytest.approx(1.0)
        assert out[1, 0, 0] == pytest.approx(math.exp(-1.0), rel=1e-12)
        assert out[2, 0, 0] == pytest.approx(math.exp(-5.0), rel=1e-12)

    def test_range(self, rng):
        sim = rng.uniform(-1, 1, (4, 4, 1))
        out = match_probability_exp(sim, 0.5)
        assert (out > 0).all() and (out <= 1).all()


class TestReliabilityLoss:
    def test_perfect_match_zero(self):
        d = np.zeros((5, 5, 3), np.float32)
        d[:, :, 0] = 1.0
        s = np.full((5, 5, 1), 0.8, np.float32)
        pts = (kp(2, 2, 0.8), kp(1, 3, 0.6))
        corr = CorrespondenceSet(np.eye(3), pts, pts)
        loss = reliability_loss(corr, (s, s), (d, d), t=0.02)
        assert loss == pytest.approx(0.0, abs=1e-9)

    def test_single_unreliable_keypoint_one(self):
        # descriptor map of B orthogonal to A's: r = exp(-2/t) ~ 0
        da = np.zeros((5, 5, 2), np.float32)
        da[:, :, 0] = 1.0
        db = np.zeros((5, 5, 2), np.float32)
        db[:, :, 1] = 1.0
        s = np.full((5, 5, 1), 0.9, np.float32)
        corr = CorrespondenceSet(np.eye(3), (kp(2, 2, 0.9),), (kp(2, 2, 0.9),))
        loss = reliability_loss(corr, (s, s), (da, db), t=0.02)
        assert loss == pytest.approx(1.0, abs=1e-6)

    def test_matches_loop_oracle(self, rng):
        h = w = 7
        desc_a = unit_maps(rng, h, w, 3)
        desc_b = unit_maps(rng, h, w, 3)
        score_a = rng.uniform(0.2, 0.9, (h, w, 1)).astype(np.float32)
        score_b = rng.uniform(0.2, 0.9, (h, w, 1)).astype(np.float32)
        hm = np.array([[1, 0, 0.5], [0, 1, -0.25], [0, 0, 1]])
        pts_a = tuple(kp(x, y, sc) for x, y, sc in rng.uniform(1.5, 4.5, (6, 3)))
        pts_b = tuple(kp(x, y, sc) for x, y, sc in rng.uniform(1.5, 4.5, (4, 3)))
        corr = CorrespondenceSet(hm, pts_a, pts_b)
        t = 0.1

        weights, unrel = [], []
        for p in pts_a:
            v = hm @ np.array([p.x, p.y, 1.0])
            qx, qy = v[0] / v[2], v[1] / v[2]
            if not (0 <= qx <= w - 1 and 0 <= qy <= h - 1):
                continue
            d = np.array(
                [bilinear_oracle(desc_a[:, :, c], p.x, p.y) for c in range(3)]
            )
            d /= np.linalg.norm(d)
            sim = np.einsum("hwc,c->hw", desc_b.astype(np.float64), d)
            prob = np.exp((sim - 1.0) / t)
            r = bilinear_oracle(prob, qx, qy)
            s_ab = bilinear_oracle(score_b[:, :, 0], qx, qy)
            weights.append(p.score * s_ab)
            unrel.append(1.0 - r)
        total = sum(weights)
        want = sum(wt / total * u for wt, u in zip(weights, unrel)) / len(pts_a)

        got = reliability_loss(corr, (score_a, score_b), (desc_a, desc_b), t)
        assert got == pytest.approx(want, rel=1e-9)

    def test_empty_keypoints_signaled(self, rng):
        d = unit_maps(rng, 4, 4, 2)
        s = np.full((4, 4, 1), 0.5, np.float32)
        corr = CorrespondenceSet(np.eye(3), (), (kp(1, 1),))
        with pytest.raises(EmptyPairingError):
            reliability_loss(corr, (s, s), (d, d), 0.02)


class TestKeypointLoss:
    def test_stubbed_components_combine(self, monkeypatch):
        monkeypatch.setattr(losses, "reprojection_loss", lambda corr, radius: 2.0)
        monkeypatch.setattr(
            losses, "line_peaky_loss", lambda s, p, n, sigma: 4.0
        )
        monkeypatch.setattr(
            losses, "reliability_loss", lambda corr, s, d, t: 6.0
        )
        pts = (kp(8, 8, 0.5),)
        corr = CorrespondenceSet(np.eye(3), pts, pts)
        s = np.full((17, 17, 1), 0.5, np.float32)
        d = np.zeros((17, 17, 2), np.float32)
        d[:, :, 0] = 1.0
        got = keypoint_loss(corr, (s, s), (d, d), LossWeights())
        # 1*2 + 0.5*4 + 1*6 with the standard weights
        assert got == pytest.approx(10.0, rel=1e-12)

    def test_matches_component_sum(self, rng):
        h = w = 15
        desc_a = unit_maps(rng, h, w, 3)
        desc_b = unit_maps(rng, h, w, 3)
        score_a = rng.uniform(0.2, 0.9, (h, w, 1)).astype(np.float32)
        score_b = rng.uniform(0.2, 0.9, (h, w, 1)).astype(np.float32)
        pts_a = tuple(kp(x, y, sc) for x, y, sc in rng.uniform(4, 10, (5, 3)))
        pts_b = tuple(kp(x, y, sc) for x, y, sc in rng.uniform(4, 10, (4, 3)))
        corr = CorrespondenceSet(np.eye(3), pts_a, pts_b)
        lw = LossWeights(temperature=0.1)

        rp = reprojection_loss(corr, 3.0)
        lpk = sum(
            line_peaky_loss(score_a, p, lw.patch_size, lw.line_sigma) for p in pts_a
        ) + sum(
            line_peaky_loss(score_b, p, lw.patch_size, lw.line_sigma) for p in pts_b
        )
        rel_a = reliability_loss(corr, (score_a, score_b), (desc_a, desc_b), 0.1)
        rel_b = reliability_loss(
            corr.swapped(), (score_b, score_a), (desc_b, desc_a), 0.1
        )
        want = 1.0 * rp + 0.5 * lpk / 9 + 1.0 * 0.5 * (rel_a + rel_b)

        got = keypoint_loss(corr, (score_a, score_b), (desc_a, desc_b), lw)
        assert got == pytest.approx(want, rel=1e-12)


def softmax_oracle(desc_query, desc_map, t, mask_center=None, mask_radius=None):
    """Explicit-loop masked softmax over all positions."""
    h, w, _ = desc_map.shape
    z = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            sim = float(np.dot(desc_map[y, x].astype(np.float64), desc_query))
            if mask_radius is not None:
                inside = (
                    max(abs(x - mask_center[0]), abs(y - mask_center[1]))
                    < mask_radius
                )
                sim = sim if inside else 0.0
            z[y, x] = (sim - 1.0) / t
    e = np.exp(z - z.max())
    return e / e.sum()


class TestNreLoss:
    def test_softmax_sums_to_one(self, rng):
        m = unit_maps(rng, 6, 5, 4)
        d = rng.standard_normal(4)
        d /= np.linalg.norm(d)
        prob = match_probability_softmax(d, m, 0.02)
        assert float(prob.sum()) == pytest.approx(1.0, abs=1e-5)
        masked = match_probability_softmax(
            d, m, 0.02, mask_center=(2.0, 3.0), mask_radius=2
        )
        assert float(masked.sum()) == pytest.approx(1.0, abs=1e-5)

    def test_one_pixel_image_zero(self):
        d = np.zeros((1, 1, 2), np.float32)
        d[0, 0, 0] = 1.0
        corr = CorrespondenceSet(np.eye(3), (kp(0, 0),), (kp(0, 0),))
        assert nre_loss(corr, (d, d), 0.02) == pytest.approx(0.0, abs=1e-12)

    def test_matches_loop_oracle_4x4(self, rng):
        h = w = 4
        desc_a = unit_maps(rng, h, w, 3)
        desc_b = unit_maps(rng, h, w, 3)
        hm = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1]])
        pts_a = (kp(1.0, 1.0), kp(2.0, 1.5))
        pts_b = (kp(1.5, 2.0),)
        corr = CorrespondenceSet(hm, pts_a, pts_b)
        t = 0.2

        def term(points, src, dst, matrix):
            total, used = 0.0, 0
            for p in points:
                v = matrix @ np.array([p.x, p.y, 1.0])
                qx, qy = v[0] / v[2], v[1] / v[2]
                if not (0 <= qx <= w - 1 and 0 <= qy <= h - 1):
                    continue
                d = np.array(
                    [bilinear_oracle(src[:, :, c], p.x, p.y) for c in range(3)]
                )
                d /= np.linalg.norm(d)
                prob = softmax_oracle(d, dst, t)
                total += -math.log(bilinear_oracle(prob, qx, qy))
                used += 1
            return total, used

        fa, ua = term(pts_a, desc_a, desc_b, hm)
        fb, ub = term(pts_b, desc_b, desc_a, np.linalg.inv(hm))
        want = (fa + fb) / (ua + ub)
        assert nre_loss(corr, (desc_a, desc_b), t) == pytest.approx(want, rel=1e-9)

    def test_symmetry_under_swap(self, rng):
        desc_a = unit_maps(rng, 6, 6, 3)
        desc_b = unit_maps(rng, 6, 6, 3)
        hm = np.array([[1, 0, 0.5], [0, 1, -0.5], [0, 0, 1]])
        pts_a = (kp(2, 2), kp(3, 2.5))
        pts_b = (kp(2.5, 3), kp(1.5, 2))
        corr = CorrespondenceSet(hm, pts_a, pts_b)
        a = nre_loss(corr, (desc_a, desc_b), 0.1)
        b = nre_loss(corr.swapped(), (desc_b, desc_a), 0.1)
        assert a == pytest.approx(b, abs=1e-6)
        ra = reprojection_loss(corr)
        rb = reprojection_loss(corr.swapped())
        assert ra == pytest.approx(rb, abs=1e-6)


class TestMnreLoss:
    def test_full_mask_equals_nre(self, rng):
        feat_a = unit_maps(rng, 8, 8, 3)
        feat_b = unit_maps(rng, 8, 8, 3)
        pts = (kp(3, 3), kp(5, 4))
        corr = CorrespondenceSet(np.eye(3), pts, pts)
        full = mnre_loss(corr, (feat_a, feat_b), 0.1, d=100)
        plain = nre_loss(corr, (feat_a, feat_b), 0.1)
        assert full == pytest.approx(plain, abs=1e-6)

    def test_mask_locality(self, rng):
        h = w = 12
        feat_a = unit_maps(rng, h, w, 3)
        feat_b = unit_maps(rng, h, w, 3)
        pts = (kp(3, 3),)
        corr = CorrespondenceSet(np.eye(3), pts, pts)
        t, d = 1.0, 3

        base_m = mnre_loss(corr, (feat_a, feat_b), t, d)
        base_n = nre_loss(corr, (feat_a, feat_b), t)

        # perturb strictly outside the Chebyshev-radius-3 box around (3, 3)
        feat_b2 = feat_b.copy()
        feat_b2[10, 10] = np.roll(feat_b2[10, 10], 1)
        pert_m = mnre_loss(corr, (feat_a, feat_b2), t, d)
        pert_n = nre_loss(corr, (feat_a, feat_b2), t)

        assert abs(pert_m - base_m) <= 1e-9 * max(abs(base_m), 1e-12)
        assert abs(pert_n - base_n) > 1e-6

    def test_matches_loop_oracle_8x8(self, rng):
        h = w = 8
        feat_a = unit_maps(rng, h, w, 3)
        feat_b = unit_maps(rng, h, w, 3)
        hm = np.array([[1, 0, 1.0], [0, 1, 0.5], [0, 0, 1]])
        pts_a = (kp(3, 3), kp(4.5, 2))
        pts_b = (kp(4, 4),)
        corr = CorrespondenceSet(hm, pts_a, pts_b)
        t, d = 0.25, 3

        def term(points, src, dst, matrix):
            total, used = 0.0, 0
            for p in points:
                v = matrix @ np.array([p.x, p.y, 1.0])
                qx, qy = v[0] / v[2], v[1] / v[2]
                if not (0 <= qx <= w - 1 and 0 <= qy <= h - 1):
                    continue
                dq = np.array(
                    [bilinear_oracle(src[:, :, c], p.x, p.y) for c in range(3)]
                )
                dq /= np.linalg.norm(dq)
                prob = softmax_oracle(dq, dst, t, (p.x, p.y), d)
                total += -math.log(bilinear_oracle(prob, qx, qy))
                used += 1
            return total, used

        fa, ua = term(pts_a, feat_a, feat_b, hm)
        fb, ub = term(pts_b, feat_b, feat_a, np.linalg.inv(hm))
        want = (fa + fb) / (ua + ub)
        got = mnre_loss(corr, (feat_a, feat_b), t, d)
        assert got == pytest.approx(want, rel=1e-9)

    def test_symmetry_under_swap(self, rng):
        feat_a = unit_maps(rng, 7, 7, 3)
        feat_b = unit_maps(rng, 7, 7, 3)
        hm = np.array([[1, 0, -0.5], [0, 1, 0.25], [0, 0, 1]])
        pts_a = (kp(3, 3), kp(2, 4))
        pts_b = (kp(3.5, 3),)
        corr = CorrespondenceSet(hm, pts_a, pts_b)
        a = mnre_loss(corr, (feat_a, feat_b), 0.2, d=3)
        b = mnre_loss(corr.swapped(), (feat_b, feat_a), 0.2, d=3)
        assert a == pytest.approx(b, abs=1e-6)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(temperature=0.0)
    with pytest.raises(ValueError):
        LossWeights(patch_size=4)
    with pytest.raises(ValueError):
        LossWeights(mask_radius=0)
