import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kdauth.features import (CutoutSpec, Encoding, NormalizationConfig, Subsequence, apply_cutout,
                             build_kdi, build_kds, cutout_batch, featurize, kds_width,
                             timing_features, window)
from kdauth.ingest import Keystroke, UserStream, pair_events, synthesize
from oracles import kdi_oracle


def random_window(rng, length):
    keys = rng.integers(0, 42, length)
    gaps = rng.integers(20, 600, length)
    press = np.cumsum(gaps)
    holds = rng.integers(30, 250, length)
    return Subsequence("u", [Keystroke(int(k), int(p), int(p + h)) for k, p, h in zip(keys, press, holds)])


def stream_of(n):
    return UserStream("u", [Keystroke(i % 42, 10 * i, 10 * i + 5) for i in range(n)])


class TestWindow:
    @pytest.mark.parametrize("n, length, expected", [(250, 100, 2), (99, 100, 0), (300, 75, 4)])
    def test_counts(self, n, length, expected):
        subs = window(stream_of(n), length)
        assert len(subs) == expected
        assert all(len(s) == length for s in subs)

    def test_consecutive_non_overlapping(self):
        subs = window(stream_of(250), 100)
        assert subs[1].keystrokes[0].press_ms == 1000

    def test_length_below_two(self):
        with pytest.raises(ValueError):
            window(stream_of(10), 1)


class TestTimingFeatures:
    def test_example(self):
        t = timing_features(Keystroke(0, 0, 100), Keystroke(1, 150, 260))
        assert (t.duration_a, t.duration_b, t.dd, t.ud, t.uu, t.du) == (100, 110, 150, 50, 160, 260)

    def test_rollover(self):
        assert timing_features(Keystroke(0, 0, 100), Keystroke(1, 50, 150)).ud == -50

    def test_degenerate_self_pair(self):
        a = Keystroke(0, 0, 100)
        t = timing_features(a, a)
        assert (t.dd, t.ud, t.uu, t.du) == (0, -100, 0, 100)

    @given(st.integers(0, 10**6), st.integers(0, 5000), st.integers(0, 5000), st.integers(0, 5000))
    def test_identities(self, pa, ha, gap, hb):
        a, b = Keystroke(0, pa, pa + ha), Keystroke(1, pa + gap, pa + gap + hb)
        t = timing_features(a, b)
        assert t.du - t.dd == t.duration_b
        assert t.uu - t.ud == t.duration_b


class TestKDI:
    def test_mean_of_repeated_pair(self):
        # a->b twice, with UD 40 and 60
        ks = [Keystroke(0, 0, 100), Keystroke(1, 140, 200), Keystroke(0, 300, 400), Keystroke(1, 460, 500)]
        kdi = build_kdi(Subsequence("u", ks))
        assert kdi[0, 0, 1] == pytest.approx(0.01, abs=1e-12)

    def test_shape_zero_fill_and_diagonal(self):
        sub = random_window(np.random.default_rng(0), 100)
        kdi = build_kdi(sub)
        assert kdi.shape == (5, 42, 42)
        typed = {k.key_index for k in sub.keystrokes}
        for k in set(range(42)) - typed:
            assert not kdi[:, k, :].any() and not kdi[:, :, k].any()
        off = kdi[4] - np.diag(np.diag(kdi[4]))
        assert not off.any()
        assert np.abs(kdi).max() <= 1.0

    def test_at_most_n_minus_one_pairs(self):
        kdi = build_kdi(random_window(np.random.default_rng(1), 100))
        for c in range(4):
            assert np.count_nonzero(kdi[c]) <= 99

    def test_clamp(self):
        ks = [Keystroke(0, 0, 10), Keystroke(1, 90_000, 90_010)]
        kdi = build_kdi(Subsequence("u", ks))
        assert kdi[1, 0, 1] == 1.0

    def test_custom_clip(self):
        ks = [Keystroke(0, 0, 100), Keystroke(1, 150, 260)]
        kdi = build_kdi(Subsequence("u", ks), NormalizationConfig(1000))
        assert kdi[0, 0, 1] == pytest.approx(0.05)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        for length in (50, 75, 100):
            sub = random_window(rng, length)
            np.testing.assert_allclose(build_kdi(sub), kdi_oracle(sub.keystrokes), atol=1e-9, rtol=0)


class TestKDS:
    def test_widths(self):
        sub = random_window(np.random.default_rng(2), 100)
        assert build_kds(sub, "onehot").shape == (100, 48)
        assert build_kds(sub, "index").shape == (100, 7)
        assert kds_width(Encoding.ONEHOT) == 48 and kds_width("index") == 7

    def test_onehot_rows_and_first_row(self):
        sub = random_window(np.random.default_rng(3), 60)
        kds = build_kds(sub, "onehot")
        np.testing.assert_array_equal(kds[:, :42].sum(axis=1), np.ones(60))
        assert not kds[0, 43:].any()

    def test_key_a_onehot(self):
        sub = Subsequence("u", [Keystroke(0, 0, 100), Keystroke(3, 150, 260)])
        kds = build_kds(sub, "onehot")
        assert kds[0, 0] == 1.0 and kds[0, :42].sum() == 1.0

    def test_columns(self):
        sub = Subsequence("u", [Keystroke(0, 0, 100), Keystroke(41, 150, 260)])
        kds = build_kds(sub, "index")
        np.testing.assert_allclose(kds[1], [1.0, 110 / 5000, 150 / 5000, 50 / 5000, 160 / 5000,
                                            260 / 5000, 100 / 5000])
        np.testing.assert_allclose(kds[0], [0.0, 100 / 5000, 0, 0, 0, 0, 0])


class TestCutout:
    def test_forced_kdi_patch(self):
        x = np.random.default_rng(0).uniform(0.1, 1.0, (5, 42, 42))
        y = apply_cutout(x, CutoutSpec(), at=(10, 10))
        changed = y != x
        assert changed.sum() == 8 * 8 * 5
        assert (y[changed] == 0).all()
        assert changed[:, 10:18, 10:18].all()

    def test_forced_kds_span(self):
        x = np.random.default_rng(1).uniform(0.1, 1.0, (100, 48))
        y = apply_cutout(x, CutoutSpec(), at=20)
        changed = y != x
        assert changed.sum() == 10 * 48
        assert changed[20:30].all()

    def test_probability_zero_identity(self):
        x = np.random.default_rng(2).random((5, 42, 42))
        y = apply_cutout(x, CutoutSpec(probability=0.0), np.random.default_rng(0))
        np.testing.assert_array_equal(x, y)

    def test_disabled_identity(self):
        x = np.random.default_rng(2).random((100, 7))
        np.testing.assert_array_equal(apply_cutout(x, CutoutSpec(enabled=False)), x)

    def test_seeded_repeatable_and_not_in_place(self):
        x = np.random.default_rng(3).uniform(0.1, 1.0, (5, 42, 42))
        before = x.copy()
        spec = CutoutSpec(probability=1.0, rng_seed=9)
        a, b = apply_cutout(x, spec), apply_cutout(x, spec)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(x, before)
        assert (a == 0).sum() == 320

    def test_bad_placement(self):
        with pytest.raises(ValueError):
            apply_cutout(np.ones((5, 42, 42)), CutoutSpec(), at=(40, 0))

    @pytest.mark.parametrize("kw", [{"kdi_size": 0}, {"kdi_size": 43}, {"kds_span": 0}, {"probability": 1.5}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            CutoutSpec(**kw)

    def test_batch_changes_at_most_one_patch_per_sample(self):
        batch = np.random.default_rng(4).uniform(0.1, 1.0, (16, 100, 48))
        out = cutout_batch(batch, CutoutSpec(probability=0.5), np.random.default_rng(0))
        per_sample = (out != batch).reshape(16, -1).sum(axis=1)
        assert set(per_sample.tolist()) <= {0, 480}


def test_featurize_shapes():
    streams = list(pair_events(synthesize(1, 2, 450)).streams.values())
    fs = featurize(streams, "kdi", 100)
    assert fs.data.shape == (8, 5, 42, 42) and fs.data.dtype == np.float32
    assert fs.user_ids == ["user000"] * 4 + ["user001"] * 4
    kds = featurize(streams, "kds", 50, "index")
    assert kds.data.shape == (18, 50, 7)
    assert kds.channel_order[0] == "key_index"
    with pytest.raises(ValueError):
        featurize(streams, "image")
