from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decifr import mia
from decifr.errors import InsufficientDataError, InvalidInputError
from decifr.synthcell import SynthesisParams, generate_layout, synthesize_sem


def brute_force_otsu(hist):
    """Exhaustive between-class variance over all 255 cuts, in exact rationals."""
    h = [int(v) for v in hist]
    n = sum(h)
    best, best_t = None, -1
    for t in range(255):
        w0 = sum(h[: t + 1])
        w1 = n - w0
        if w0 == 0 or w1 == 0:
            continue
        mu0 = Fraction(sum(i * h[i] for i in range(t + 1)), w0)
        mu1 = Fraction(sum(i * h[i] for i in range(t + 1, 256)), w1)
        var = Fraction(w0 * w1, n * n) * (mu0 - mu1) ** 2
        if best is None or var > best:
            best, best_t = var, t
    return best_t


def random_histograms(count, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        kind = i % 3
        if kind == 0:
            h = rng.integers(0, 50, 256)
        elif kind == 1:  # bimodal
            x = np.concatenate([rng.normal(rng.uniform(30, 110), 12, 500), rng.normal(rng.uniform(140, 230), 15, 500)])
            h = np.bincount(np.clip(np.round(x), 0, 255).astype(int), minlength=256)
        else:  # sparse
            h = np.zeros(256, dtype=int)
            h[rng.choice(256, rng.integers(2, 6), replace=False)] = rng.integers(1, 100, 1)[0]
        out.append(h)
    return out


def test_otsu_matches_brute_force_on_fifty_histograms():
    for h in random_histograms(50, 0):
        assert mia.otsu_threshold(h) == brute_force_otsu(h)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=256, max_size=256))
def test_otsu_matches_brute_force_property(h):
    assert mia.otsu_threshold(h) == brute_force_otsu(h)


def test_otsu_degenerate():
    h = np.zeros(256, dtype=int)
    h[77] = 10
    assert mia.otsu_threshold(h) == -1


def test_binarize_noise_free_two_level_equals_layout():
    # rectangle-only layouts survive blur + opening + closing exactly
    p = SynthesisParams(image_size=64, intensity_std=1e-12, shot_noise_level=0.0)
    for seed in range(20):
        for node in ("coarse", "fine"):
            m = generate_layout("diffusion", node, 64, seed)
            img = synthesize_sem(m, p, seed).pixels
            assert np.array_equal(mia.binarize(img).mask, m.pixels), (seed, node)


def test_binarize_unit_and_byte_scale_agree():
    m = generate_layout("diffusion", "coarse", 64, 2)
    img = synthesize_sem(m, SynthesisParams(image_size=64, intensity_std=1e-12, shot_noise_level=0.0), 0).pixels
    assert np.array_equal(mia.binarize(img).mask, mia.binarize(img / 255.0).mask)


def test_binarize_constant_is_degenerate():
    r = mia.binarize(np.full((32, 32), 0.4))
    assert r.degenerate and r.mask.sum() == 0 and r.mask.shape == (32, 32)


def test_binarize_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        mia.binarize(np.zeros((2, 4, 4)))
    with pytest.raises(InvalidInputError):
        mia.binarize(np.full((4, 4), np.nan))


def test_dice_examples():
    a = np.zeros((6, 6), dtype=np.uint8)
    a[1:3, 1:3] = 1
    assert mia.dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[4:6, 4:6] = 1
    assert mia.dice(a, b) == 0.0
    shifted = np.zeros_like(a)
    shifted[1:3, 2:4] = 1
    assert mia.dice(a, shifted) == 0.5
    assert mia.dice(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(InvalidInputError):
        mia.dice(np.zeros((3, 3)), np.zeros((3, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))
    d = mia.dice(a, b)
    assert 0.0 <= d <= 1.0 and d == mia.dice(b, a)


def test_mean_threshold_two_scores():
    t, v = mia.mean_threshold_classify([("a", 0.2), ("b", 0.8)])
    assert t == 0.5
    assert [x.verdict for x in v] == [mia.NON_MEMBER, mia.MEMBER]


def test_mean_threshold_ties_are_non_members():
    t, v = mia.mean_threshold_classify([("a", 0.4), ("b", 0.4), ("c", 0.4)])
    assert t == pytest.approx(0.4)
    assert all(x.verdict == mia.NON_MEMBER for x in v)


def test_mean_threshold_needs_two():
    with pytest.raises(InsufficientDataError):
        mia.mean_threshold_classify([("a", 0.3)])


def test_published_mean_sanity_fixture():
    # per-scenario pooling: each member-class population against its own non-member population
    for member, non_member in ((0.7233, 0.5876), (0.8204, 0.7130)):
        t, _ = mia.mean_threshold_classify([("m", member), ("n", non_member)])
        assert member > t > non_member
    # pooled across scenarios with equal weight per class mean
    member_mean, non_member_mean = np.mean([0.7233, 0.8204]), np.mean([0.5876, 0.7130])
    t, _ = mia.mean_threshold_classify([("m", member_mean), ("n", non_member_mean)])
    assert member_mean > t > non_member_mean


def _verdicts(members, non_members, threshold=None):
    scores = [(f"m{i}", s) for i, s in enumerate(members)] + [(f"n{i}", s) for i, s in enumerate(non_members)]
    gt = [mia.MEMBER] * len(members) + [mia.NON_MEMBER] * len(non_members)
    t, v = mia.mean_threshold_classify(scores, gt)
    if threshold is not None:
        for x in v:
            x.threshold = threshold
    return t, v


def test_perfectly_separated_scores():
    _, v = _verdicts([0.9, 0.8, 0.85], [0.1, 0.2, 0.3])
    rep = mia.attack_metrics(v)
    assert rep.auc == 1.0 and rep.accuracy == 1.0


def test_identical_scores_auc_half():
    _, v = _verdicts([0.5, 0.5], [0.5, 0.5])
    assert mia.attack_metrics(v).auc == 0.5


def test_four_point_fixture_auc_and_consistent_confusion():
    t, v = _verdicts([0.9, 0.7], [0.6, 0.2])
    assert t == pytest.approx(0.6)
    rep = mia.attack_metrics(v)
    assert rep.auc == 1.0
    # with T = 0.6 and member iff score > T: 0.9, 0.7 -> member; 0.6, 0.2 -> non-member
    assert (rep.accuracy, rep.precision, rep.recall) == (1.0, 1.0, 1.0)


def test_four_point_fixture_at_threshold_point_seven():
    # the quoted (0.75, 1.0, 0.5) confusion is what the strict rule yields at T = 0.7
    _, v = _verdicts([0.9, 0.7], [0.6, 0.2], threshold=0.7)
    rep = mia.attack_metrics(v)
    assert (rep.accuracy, rep.precision, rep.recall) == (0.75, 1.0, 0.5)


def test_single_class_ground_truth_rejected():
    _, v = mia.mean_threshold_classify([("a", 0.3), ("b", 0.6)], [mia.MEMBER, mia.MEMBER])
    with pytest.raises(InsufficientDataError):
        mia.attack_metrics(v)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_auc_matches_pairwise_oracle(pos, neg):
    """Trapezoidal AUC equals the Mann-Whitney statistic with ties counted half."""
    scores = pos + neg
    labels = [True] * len(pos) + [False] * len(neg)
    auc = mia.auc_trapezoid(mia.roc_curve(scores, labels))
    pairs = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    assert auc == pytest.approx(pairs / (len(pos) * len(neg)), abs=1e-12)


def test_roc_starts_at_origin_and_ends_at_one():
    pts = mia.roc_curve([0.1, 0.4, 0.35, 0.8], [False, False, True, True])
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    assert mia.auc_trapezoid(pts) == pytest.approx(0.75)


def test_report_json_shape():
    _, v = _verdicts([0.9, 0.7], [0.6, 0.2])
    d = mia.attack_metrics(v).to_json()
    assert set(d) == {"threshold", "accuracy", "precision", "recall", "auc", "n", "roc"}
