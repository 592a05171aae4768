import numpy as np
import pytest

from orthoadapt.data import (
    DEFAULT_DOMAINS,
    CorruptionSpec,
    DomainSpec,
    DomainStream,
    corrupt,
    cyclic_orders,
    decode_pgm,
    decode_ppm,
    encode_ppm,
    fog,
    gen_scene,
    load_sample,
    materialize,
    build_stream,
    save_sample,
)
from orthoadapt.errors import ConfigurationError, FormatError

KINDS = ("fog", "dark", "noise", "blur")


class TestGenScene:
    def test_deterministic(self):
        a, b = gen_scene(42), gen_scene(42)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.label.tobytes() == b.label.tobytes()

    def test_ranges(self):
        for seed in range(10):
            s = gen_scene(seed, 20, 24, 4)
            assert s.image.shape == (3, 20, 24) and s.label.shape == (20, 24)
            assert 0 <= s.label.min() and s.label.max() < 4
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_class_mean_colours_separate(self):
        # class-conditional mean colour, pooled over scenes
        sums, counts = np.zeros((5, 3)), np.zeros(5)
        for seed in range(30):
            s = gen_scene(seed)
            for c in range(5):
                m = s.label == c
                sums[c] += s.image[:, m].sum(axis=1)
                counts[c] += m.sum()
        means = sums / counts[:, None]
        for i in range(5):
            for j in range(i + 1, 5):
                assert np.abs(means[i] - means[j]).max() >= 0.1

    @pytest.mark.parametrize("h,w,k", [(15, 32, 3), (32, 8, 3), (32, 32, 1)])
    def test_preconditions(self, h, w, k):
        with pytest.raises(ConfigurationError):
            gen_scene(0, h, w, k)


class TestCorrupt:
    @pytest.mark.parametrize("kind", KINDS)
    def test_severity_zero_is_identity(self, kind):
        x = gen_scene(1).image
        np.testing.assert_array_equal(corrupt(x, CorruptionSpec(kind, 0.0, 3)), x)

    @pytest.mark.parametrize("kind", KINDS)
    def test_stays_in_range(self, kind):
        out = corrupt(gen_scene(2).image, CorruptionSpec(kind, 1.0, 5))
        assert 0.0 <= out.min() and out.max() <= 1.0

    def test_dark_lowers_mean(self):
        x = gen_scene(3).image
        assert corrupt(x, CorruptionSpec("dark", 1.0)).mean() < x.mean()

    def test_fog_full_weight_is_white(self):
        x = gen_scene(4).image
        np.testing.assert_array_equal(fog(x, 1.0, np.ones(x.shape[1:])), 1.0)

    def test_fog_is_convex_blend(self):
        x = gen_scene(4).image
        out = corrupt(x, CorruptionSpec("fog", 0.6, 1))
        assert np.all(out >= x - 1e-12)

    def test_dark_monotone(self):
        x = gen_scene(5).image
        means = [corrupt(x, CorruptionSpec("dark", s)).mean() for s in np.linspace(0, 1, 20)]
        assert all(b <= a for a, b in zip(means, means[1:]))

    def test_noise_mse_monotone(self):
        x = gen_scene(6).image
        mse = []
        for s in np.linspace(0, 1, 20):
            errs = [((corrupt(x, CorruptionSpec("noise", s, k)) - x) ** 2).mean() for k in range(5)]
            mse.append(np.mean(errs))
        assert all(b >= a for a, b in zip(mse, mse[1:]))

    def test_blur_smooths(self):
        x = gen_scene(7).image
        out = corrupt(x, CorruptionSpec("blur", 1.0))
        tv = lambda a: np.abs(np.diff(a, axis=2)).mean()
        assert tv(out) < tv(x)

    def test_bad_spec(self):
        with pytest.raises(ConfigurationError):
            CorruptionSpec("hail", 0.5)
        with pytest.raises(ConfigurationError):
            CorruptionSpec("fog", 1.5)


class TestStream:
    def test_counting(self):
        assert len(build_stream(DEFAULT_DOMAINS, 10, 3, 0)) == 120

    def test_unique_ids(self):
        stream = build_stream(DEFAULT_DOMAINS, 10, 3, 0)
        ids = [e.sample_id for e in stream]
        assert len(set(ids)) == len(ids)

    def test_permuted_order_same_multiset(self):
        a = build_stream(DEFAULT_DOMAINS, 5, 3, 9)
        b = build_stream(list(reversed(DEFAULT_DOMAINS)), 5, 3, 9)
        assert sorted(a.entries, key=repr) == sorted(b.entries, key=repr)
        assert a.entries != b.entries

    def test_cyclic_orders(self):
        orders = cyclic_orders(DEFAULT_DOMAINS)
        assert [o[0].name for o in orders] == [d.name for d in DEFAULT_DOMAINS]
        assert [d.name for d in orders[1]] == ["night", "rain", "snow", "fog"]

    def test_duplicate_names(self):
        with pytest.raises(ConfigurationError):
            build_stream([DomainSpec("a", "fog", 0.5), DomainSpec("a", "dark", 0.5)], 2, 1, 0)

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            build_stream([], 2, 1, 0)

    def test_manifest_round_trip(self, tmp_path):
        stream = build_stream(DEFAULT_DOMAINS, 4, 2, 3)
        path = tmp_path / "m.csv"
        stream.save(path)
        again = DomainStream.load(path)
        assert again.entries == stream.entries
        assert again.to_manifest().encode() == path.read_bytes()

    def test_bad_manifest(self):
        with pytest.raises(FormatError):
            DomainStream.from_manifest("round,domain\n1,a\n")

    def test_materialize_deterministic(self):
        e = build_stream(DEFAULT_DOMAINS, 2, 1, 0).entries[3]
        assert materialize(e).image.tobytes() == materialize(e).image.tobytes()

    def test_corruption_keeps_label(self):
        e = build_stream(DEFAULT_DOMAINS, 2, 1, 0).entries[0]
        np.testing.assert_array_equal(materialize(e).label, gen_scene(e.seed).label)


class TestPortableImages:
    def test_round_trip_within_quantization(self, tmp_path):
        s = gen_scene(11)
        save_sample(tmp_path / "i.ppm", tmp_path / "l.pgm", s)
        back = load_sample(tmp_path / "i.ppm", tmp_path / "l.pgm")
        assert np.abs(back.image - s.image).max() <= 0.5 / 255 + 1e-12
        np.testing.assert_array_equal(back.label, s.label)

    def test_black_payload(self):
        buf = encode_ppm(np.zeros((3, 2, 3)))
        assert buf.endswith(bytes(18))
        assert buf[: -18] == b"P6\n3 2\n255\n"

    def test_crafted_fixture(self):
        payload = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153])
        img = decode_ppm(b"P6\n# fixture\n2 2\n255\n" + payload)
        expected = np.array([[[1, 0], [0, 0.2]], [[0, 1], [0, 0.4]], [[0, 0], [1, 0.6]]])
        np.testing.assert_allclose(img, expected, atol=1e-15)

    def test_pgm_fixture(self):
        np.testing.assert_array_equal(decode_pgm(b"P5 2 1 255\n\x03\x01"), [[3, 1]])

    def test_truncated(self):
        with pytest.raises(FormatError, match="offset"):
            decode_ppm(b"P6\n2 2\n255\n" + bytes(5))

    def test_bad_magic(self):
        with pytest.raises(FormatError) as err:
            decode_ppm(b"P3\n2 2\n255\n")
        assert err.value.offset == 0

    def test_bad_header(self):
        with pytest.raises(FormatError):
            decode_ppm(b"P6\n2 x\n255\n")
