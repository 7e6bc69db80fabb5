import hashlib
from dataclasses import replace

import numpy as np
import pytest

from facesim.dataset import MANIFEST_NAME, DatasetManifest, FaceData
from facesim.scores import UserRecord, eligibility_matrix, fit_normalization
from facesim.world import (
    DatasetError,
    WorldConfig,
    _split_sizes,
    build_dataset,
    face_parameters,
    gen_users,
    oracle_raw_matrix,
    oracle_raw_scores,
    render_face,
)


def with_traits(u, traits):
    return UserRecord(u.user_id, u.sex, u.age, tuple(traits), u.image_ids, u.split)


class TestGenUsers:
    def test_deterministic(self):
        cfg = WorldConfig(n_users=50, seed=4)
        assert gen_users(cfg) == gen_users(cfg)
        assert gen_users(cfg) != gen_users(replace(cfg, seed=5))

    def test_counts_and_bounds(self):
        cfg = WorldConfig(n_users=100)
        users = gen_users(cfg)
        assert len(users) == 100
        assert all(len(u.image_ids) >= 1 for u in users)
        assert all(18 <= u.age <= 70 for u in users)
        assert sum(u.sex == "female" for u in users) == 50
        assert all(0 <= t <= 1 for u in users for t in u.traits)

    def test_ages_bell_shaped(self):
        ages = np.array([u.age for u in gen_users(WorldConfig(n_users=2000))])
        centre = np.mean((ages >= 35) & (ages <= 49))
        edge = np.mean((ages >= 18) & (ages <= 32))
        assert centre > edge

    def test_coupling_sets_criterion_correlation(self):
        users = gen_users(WorldConfig(n_users=4000, coupling=0.7, seed=2))
        traits = np.array([u.traits for u in users])
        raw = np.array([oracle_raw_scores(users[2 * k], users[2 * k + 1]) for k in range(2000)])
        corr = np.corrcoef(raw.T)
        off = corr[~np.eye(5, dtype=bool)]
        assert np.all(np.abs(off - 0.7) < 0.1), off
        assert traits.shape == (4000, 20)

    def test_zero_coupling_uncorrelated(self):
        users = gen_users(WorldConfig(n_users=4000, coupling=0.0, seed=2))
        raw = np.array([oracle_raw_scores(users[2 * k], users[2 * k + 1]) for k in range(2000)])
        off = np.corrcoef(raw.T)[~np.eye(5, dtype=bool)]
        assert np.all(np.abs(off) < 0.1)


class TestOracle:
    def setup_method(self):
        self.users = gen_users(WorldConfig(n_users=30, seed=7))

    def test_self_is_zero(self):
        for u in self.users:
            assert np.all(oracle_raw_scores(u, u) == 0)

    def test_opposite_corners(self):
        a = with_traits(self.users[0], [0.0] * 20)
        b = with_traits(self.users[1], [1.0] * 20)
        assert np.all(oracle_raw_scores(a, b) == 5.0)

    def test_matches_l1_loop(self):
        for a, b in zip(self.users[::2], self.users[1::2]):
            got = oracle_raw_scores(a, b)
            for c in range(5):
                dist = 0.0
                for k in range(4):
                    dist += abs(a.traits[4 * c + k] - b.traits[4 * c + k])
                assert got[c] == pytest.approx(5 * dist / 4, abs=1e-12)

    def test_symmetric_and_matrix_agrees(self):
        traits = np.array([u.traits for u in self.users])
        mat = oracle_raw_matrix(traits, traits)
        for i, a in enumerate(self.users):
            for j, b in enumerate(self.users):
                assert np.array_equal(oracle_raw_scores(a, b), oracle_raw_scores(b, a))
                np.testing.assert_allclose(mat[i, j], oracle_raw_scores(a, b), atol=1e-12)

    def test_monotone_in_block_distance(self):
        a = with_traits(self.users[0], [0.2] * 20)
        prev = -1.0
        for v in np.linspace(0.2, 1.0, 9):
            traits = [0.2] * 20
            traits[8] = v  # first trait of the M3 block
            score = oracle_raw_scores(a, with_traits(self.users[1], traits))
            assert score[2] > prev
            assert np.all(score[[0, 1, 3, 4]] == 0)
            prev = score[2]


class TestRender:
    def setup_method(self):
        self.cfg = WorldConfig(n_users=10, seed=9, images_per_user=(2, 3))
        self.users = gen_users(self.cfg)

    def test_deterministic_and_in_range(self):
        u = self.users[0]
        a, b = render_face(u, 1, self.cfg), render_face(u, 1, self.cfg)
        assert np.array_equal(a.pixels, b.pixels)
        assert a.pixels.shape == (96, 96, 3)
        assert a.pixels.min() >= 0 and a.pixels.max() <= 1

    def test_box_inside_image(self):
        for u in self.users:
            for k in range(len(u.image_ids)):
                box = render_face(u, k, self.cfg).true_box
                left, top, right, bottom = box.edges()
                assert 0 <= left < right <= 96 and 0 <= top < bottom <= 96

    def test_nuisance_off_gives_identical_images(self):
        cfg = replace(self.cfg, nuisance_strength=0.0)
        u = self.users[0]
        assert np.array_equal(render_face(u, 0, cfg).pixels, render_face(u, 1, cfg).pixels)

    def test_nuisance_on_varies_images(self):
        u = self.users[0]
        assert not np.array_equal(render_face(u, 0, self.cfg).pixels, render_face(u, 1, self.cfg).pixels)

    def test_zero_signal_ignores_traits(self):
        cfg = replace(self.cfg, signal_strength=0.0)
        u = self.users[0]
        other = with_traits(u, 1.0 - np.asarray(u.traits))
        assert np.array_equal(face_parameters(u, cfg), face_parameters(other, cfg))
        assert np.array_equal(render_face(u, 0, cfg).pixels, render_face(other, 0, cfg).pixels)

    def test_full_signal_equal_traits_equal_parameters(self):
        a, b = self.users[0], self.users[1]
        twin = with_traits(b, a.traits)
        np.testing.assert_array_equal(face_parameters(a, self.cfg), face_parameters(twin, self.cfg))

    def test_full_signal_follows_traits(self):
        u = self.users[0]
        other = with_traits(u, 1.0 - np.asarray(u.traits))
        assert not np.array_equal(face_parameters(u, self.cfg), face_parameters(other, self.cfg))

    def test_bad_index(self):
        with pytest.raises(IndexError):
            render_face(self.users[0], 5, self.cfg)


class TestBuildDataset:
    def test_split_sizes(self):
        assert _split_sizes(600, (0.7, 0.15, 0.15)) == [420, 90, 90]

    def test_invalid_fractions(self):
        with pytest.raises(DatasetError):
            _split_sizes(100, (0.5, 0.2, 0.2))

    def test_splits_disjoint_and_complete(self, tiny_data):
        users = tiny_data.manifest.users
        assert [sum(u.split == s for u in users) for s in ("train", "val", "test")] == [42, 9, 9]
        for name in ("train", "val", "test"):
            view = tiny_data.split(name)
            assert {u.split for u in view.users} == {name}

    def test_normalization_fit_on_train_only(self, tiny_data):
        train = tiny_data.split("train").users
        traits = np.array([u.traits for u in train])
        elig = eligibility_matrix([u.sex for u in train], [u.age for u in train], "hetero")
        i, j = np.nonzero(np.triu(elig, k=1))
        expected = fit_normalization(oracle_raw_matrix(traits, traits)[i, j])
        assert tiny_data.normalization == expected

    def test_self_match_adjusts_to_one(self, tiny_data):
        view = tiny_data.split("test")
        assert np.all(np.diagonal(view.adjusted, axis1=0, axis2=1) == 1.0)

    def test_split_without_eligible_pairs(self):
        with pytest.raises(DatasetError, match="eligible"):
            build_dataset(WorldConfig(n_users=8, image_size=32), (0.5, 0.25, 0.25))

    def test_manifest_byte_identical(self, tmp_path, tiny_world):
        digests = []
        for name in ("a", "b"):
            build_dataset(tiny_world, out_dir=tmp_path / name)
            digests.append(hashlib.sha256((tmp_path / name / MANIFEST_NAME).read_bytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_manifest_round_trip(self, tiny_data_dir, tiny_data):
        loaded = FaceData.load(tiny_data_dir)
        assert loaded.manifest == tiny_data.manifest
        lines = (tiny_data_dir / MANIFEST_NAME).read_text().splitlines()
        m = tiny_data.manifest
        assert len(lines) == len(m.users) + len(m.images) + 2
        for im in m.images[:5]:
            assert np.array_equal(loaded.image(im.image_id), tiny_data.image(im.image_id))

    def test_manifest_rejects_unknown_format(self, tiny_data_dir, tmp_path):
        text = (tiny_data_dir / MANIFEST_NAME).read_text().replace("facesim-manifest/1", "other/9", 1)
        (tmp_path / MANIFEST_NAME).write_text(text)
        with pytest.raises(ValueError, match="format"):
            DatasetManifest.read(tmp_path)
