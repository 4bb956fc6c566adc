import math

import numpy as np
import pytest

from rdcl import container
from rdcl.pipeline import ridge_probe
from rdcl.synth import (
    Dataset, GenerativeSpec, World, _time_maps, episode_rng, generate_dataset, generate_episode,
    generate_object, label_rule, read_dataset, write_dataset,
)


@pytest.fixture(scope="module")
def spec():
    return GenerativeSpec(seed=7)


@pytest.fixture(scope="module")
def world(spec):
    return World.from_spec(spec)


class TestSpec:
    @pytest.mark.parametrize("kw", [{"n_static_classes": 1}, {"T": 1}, {"noise_std": -0.1},
                                    {"n_dynamic_classes": 9, "T": 4}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            GenerativeSpec(**kw)

    def test_time_maps_are_distinct_permutations(self):
        for T in (2, 4, 8, 9):
            maps = _time_maps(T)
            assert len(set(maps)) == len(maps)
            t = np.arange(T)
            for a, b in maps:
                assert sorted((a * t + b) % T) == list(range(T))


class TestObjects:
    def test_noise_free_determinism(self, world):
        spec = GenerativeSpec(noise_std=0.0, seed=7)
        o1 = generate_object(spec, np.random.default_rng(0), world, 1, 2)
        o2 = generate_object(spec, np.random.default_rng(99), world, 1, 2)
        np.testing.assert_array_equal(o1.features, o2.features)
        np.testing.assert_array_equal(o1.audio, o2.audio)

    def test_frame_mean_recovers_static(self, spec, world):
        rng = np.random.default_rng(1)
        for _ in range(20):
            o = generate_object(spec, rng, world)
            err = np.abs(o.features.mean(axis=0) - world.static_emb[o.true_static_class]).max()
            assert err < 5 * spec.noise_std / math.sqrt(spec.T)

    def test_dynamic_classes_share_frame_mean_but_differ_in_time(self, world):
        spec = GenerativeSpec(noise_std=0.0, seed=7)
        rng = np.random.default_rng(0)
        xs = [generate_object(spec, rng, world, 2, k).features for k in range(spec.n_dynamic_classes)]
        for x in xs[1:]:
            np.testing.assert_allclose(x.mean(axis=0), xs[0].mean(axis=0), atol=1e-12)
            assert not np.allclose(x, xs[0])
        spectra = [np.abs(np.fft.fft(x - x.mean(0), axis=0)).round(9).tobytes() for x in xs]
        assert len(set(spectra)) > 1
        # the frame multiset is shared too: only the order differs
        rows = [sorted(map(tuple, np.round(x, 9))) for x in xs]
        assert all(r == rows[0] for r in rows)

    def test_trajectories_zero_mean(self, world):
        np.testing.assert_allclose(world.traj.mean(axis=1), 0.0, atol=1e-12)

    def test_questions_orthonormal(self, world):
        np.testing.assert_allclose(world.questions @ world.questions.T, np.eye(2), atol=1e-12)


class TestEpisodes:
    def test_label_rule_example(self):
        assert label_rule(0, (2, 0), (5, 1)) == 1
        assert label_rule(1, (2, 3), (5, 1)) == 0

    def test_label_rule_rejects_ties(self):
        with pytest.raises(ValueError):
            label_rule(0, (2, 0), (2, 1))

    def test_swap_flips_label(self, spec, world):
        rng = np.random.default_rng(3)
        for _ in range(100):
            e = generate_episode(spec, rng, world)
            c1 = (e.obj1.true_static_class, e.obj1.true_dynamic_class)
            c2 = (e.obj2.true_static_class, e.obj2.true_dynamic_class)
            assert label_rule(e.question_type, c2, c1) == 1 - e.label
            assert c1[e.question_type] != c2[e.question_type]

    def test_label_balance(self, spec):
        ds = generate_dataset(spec, 10_000)
        p = ds.label.mean()
        assert abs(p - 0.5) <= 3 * math.sqrt(0.25 / 10_000)

    def test_oracle_and_majority_bounds(self, spec):
        ds = generate_dataset(spec, 2000)
        q = ds.qtype
        oracle = (ds.cls2[np.arange(len(ds)), q] > ds.cls1[np.arange(len(ds)), q]).astype(int)
        assert np.mean(oracle == ds.label) == 1.0
        majority = int(ds.label.mean() >= 0.5)
        assert abs(np.mean(ds.label == majority) - 0.5) < 0.05

    def test_seeded_determinism_and_independence(self, spec):
        a = generate_dataset(spec, 30)
        b = generate_dataset(spec, 30)
        np.testing.assert_array_equal(a.x1, b.x1)
        tail = generate_dataset(spec, 10, start=20)
        np.testing.assert_array_equal(a.x2[20:], tail.x2)

    def test_episode_rng_streams_differ(self):
        assert episode_rng(0, 1).random() != episode_rng(0, 2).random()


class TestLinearDecodability:
    def test_static_from_frame_mean_but_not_dynamic(self, spec):
        ds = generate_dataset(spec, 1000)
        x, cls = ds.objects()
        m = x.mean(axis=1)
        half = len(m) // 2
        static_acc, _ = ridge_probe(m[:half], cls[:half, 0], m[half:], cls[half:, 0])
        dynamic_acc, _ = ridge_probe(m[:half], cls[:half, 1], m[half:], cls[half:, 1])
        assert static_acc == 1.0
        assert dynamic_acc < 0.25 + 0.08


class TestDatasetIO:
    def test_round_trip(self, spec, tmp_path):
        ds = generate_dataset(spec, 12)
        write_dataset(tmp_path / "d.bin", ds)
        back = read_dataset(tmp_path / "d.bin")
        for name in ("x1", "x2", "a1", "a2", "q", "qtype", "label", "cls1", "cls2"):
            got, want = getattr(back, name), getattr(ds, name)
            assert got.dtype == want.dtype
            np.testing.assert_array_equal(got, want)
        assert back.spec == spec

    def test_truncated(self, spec, tmp_path):
        write_dataset(tmp_path / "d.bin", generate_dataset(spec, 3))
        raw = (tmp_path / "d.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(raw[:-17])
        with pytest.raises(container.ContainerError) as err:
            read_dataset(tmp_path / "t.bin")
        assert err.value.offset >= 0

    def test_header_version_mismatch(self, spec, tmp_path):
        ds = generate_dataset(spec, 3)
        tensors = {n: getattr(ds, n) for n in ("x1", "x2", "a1", "a2", "q", "qtype", "label", "cls1", "cls2")}
        container.save(tmp_path / "v.bin", tensors, "rdcl-dataset", {"version": 2, "spec": None})
        with pytest.raises(container.ContainerVersionError):
            read_dataset(tmp_path / "v.bin")

    def test_subset_and_episode(self, spec):
        ds = generate_dataset(spec, 5)
        sub = ds.subset(np.array([4, 1]))
        assert isinstance(sub, Dataset) and len(sub) == 2
        assert sub.episode(0).label == ds.episode(4).label
