import logging
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy import stats

import facesim.training as training
from facesim.dataset import SplitView
from facesim.net import branch_parameters, build
from facesim.scores import NormalizationParams, UserRecord
from facesim.training import (
    TrainConfig,
    TrainingError,
    TrainResult,
    grid_search,
    mtl_loss,
    probe_train,
    sample_epoch,
    train,
)
from facesim.world import WorldConfig, build_dataset, gen_users

FAST = dict(epochs=2, batch_size=8, val_pairs_per_user=3, patience=0)


@pytest.fixture(scope="module")
def big_view():
    users = gen_users(WorldConfig(n_users=1000, seed=5))
    users = [UserRecord(u.user_id, u.sex, u.age, u.traits, u.image_ids, "train") for u in users]
    params = NormalizationParams((0.5,) * 5, (3.5,) * 5)
    return SplitView("train", users, params)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(same_sex_fraction=0.6, self_identity_fraction=0.5),
                                     dict(tail_gamma=-1), dict(epochs=0), dict(selection="best"),
                                     dict(lr_grid=())])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestSampleEpoch:
    def test_one_pair_per_user_inside_split(self, big_view):
        pairs = sample_epoch(big_view, TrainConfig(), np.random.default_rng(0), 0.5)
        assert len(pairs) == len(big_view)
        members = set(big_view.index)
        assert all(p.user_a in members and p.user_b in members for p in pairs)
        for p in pairs:
            if p.kind == "normal":
                i, j = big_view.index[p.user_a], big_view.index[p.user_b]
                assert big_view.hetero[i, j]
                assert p.target.adjusted == tuple(big_view.adjusted[i, j])

    def test_uniform_partner_without_weighting(self, big_view):
        cfg = TrainConfig(tail_gamma=0.0, same_sex_fraction=0.0)
        i = 0
        cand = np.flatnonzero(big_view.hetero[i])
        counts = dict.fromkeys(big_view.users[j].user_id for j in cand)
        counts = {k: 0 for k in counts}
        rng = np.random.default_rng(1)
        small = SplitView("train", big_view.users[:1] + [big_view.users[j] for j in cand],
                          NormalizationParams((0.5,) * 5, (3.5,) * 5))
        draws = 20 * len(cand)
        for _ in range(draws // 1):
            p = sample_epoch(small, cfg, rng, 0.5)[0]
            counts[p.user_b] += 1
        chi = stats.chisquare(list(counts.values()))
        assert chi.pvalue > 0.001

    def test_self_identity_fraction(self, big_view):
        cfg = TrainConfig(self_identity_fraction=0.1)
        pairs = sample_epoch(big_view, cfg, np.random.default_rng(2), 0.5)
        special = [p for p in pairs if p.kind in ("self", "identity")]
        # binomial(1000, 0.1): sd ~ 9.5
        assert abs(len(special) - 100) <= 4 * math.sqrt(1000 * 0.1 * 0.9)
        assert all(p.target.adjusted == (1.0,) * 5 for p in special)
        assert {p.kind for p in special} == {"self", "identity"}
        for p in special:
            assert p.user_a == p.user_b
            assert (p.image_a == p.image_b) == (p.kind == "identity")

    def test_same_sex_fraction(self, big_view):
        cfg = TrainConfig(same_sex_fraction=0.3)
        pairs = sample_epoch(big_view, cfg, np.random.default_rng(3), 0.5)
        same = [p for p in pairs if p.kind == "same_sex"]
        assert abs(len(same) - 300) <= 4 * math.sqrt(1000 * 0.3 * 0.7)
        sex = {u.user_id: u.sex for u in big_view.users}
        assert all(sex[p.user_a] == sex[p.user_b] for p in same)

    def test_tail_weighting_dominates(self, big_view):
        median = float(np.median(big_view.overall[big_view.hetero]))

        def deviations(gamma, seed):
            cfg = TrainConfig(tail_gamma=gamma, same_sex_fraction=0.0)
            rng = np.random.default_rng(seed)
            out = []
            while len(out) < 10_000:
                for p in sample_epoch(big_view, cfg, rng, median):
                    i, j = big_view.index[p.user_a], big_view.index[p.user_b]
                    out.append(abs(big_view.overall[i, j] - median))
            return np.sort(out[:10_000])

        flat, tail = deviations(0.0, 4), deviations(2.0, 4)
        grid = np.linspace(0, max(flat.max(), tail.max()), 200)
        cdf_flat = np.searchsorted(flat, grid, side="right") / len(flat)
        cdf_tail = np.searchsorted(tail, grid, side="right") / len(tail)
        assert np.all(cdf_tail <= cdf_flat + 0.01)
        assert tail.mean() > flat.mean()

    def test_user_without_partner_skipped(self, caplog):
        users = [
            UserRecord("a", "female", 30, (0.2,) * 20, ("a_0",), "train"),
            UserRecord("b", "male", 32, (0.4,) * 20, ("b_0",), "train"),
            UserRecord("c", "male", 70, (0.6,) * 20, ("c_0",), "train"),
        ]
        view = SplitView("train", users, NormalizationParams((0.1,) * 5, (4.0,) * 5))
        with caplog.at_level(logging.WARNING):
            pairs = sample_epoch(view, TrainConfig(same_sex_fraction=0.0), np.random.default_rng(0), 0.5)
        assert {p.user_a for p in pairs} == {"a", "b"}
        assert "no eligible partner" in caplog.text

    def test_no_pairs_at_all(self):
        users = [UserRecord(u, "male", 30, (0.1,) * 20, (f"{u}_0",), "train") for u in "ab"]
        view = SplitView("train", users, NormalizationParams((0.1,) * 5, (4.0,) * 5))
        with pytest.raises(TrainingError):
            sample_epoch(view, TrainConfig(), np.random.default_rng(0), 0.5)


class TestLoss:
    def test_zero_at_targets(self):
        t = torch.rand(4, 5)
        assert mtl_loss(t, t).item() == 0.0

    def test_single(self):
        assert mtl_loss(torch.tensor([[0.2]]), torch.tensor([[0.7]])).item() == pytest.approx(0.25)

    def test_two_by_two(self):
        preds = torch.zeros(2, 2)
        targets = torch.tensor([[0.1, -0.1], [0.3, 0.0]])
        assert mtl_loss(preds, targets).item() == pytest.approx(0.0275)

    def test_scaling(self, rng):
        p, t = torch.rand(6, 5), torch.rand(6, 5)
        base = mtl_loss(p, t)
        scaled = mtl_loss(t + 3 * (p - t), t)
        assert scaled.item() == pytest.approx(9 * base.item(), rel=1e-5)

    def test_mean_of_head_mses(self):
        p, t = torch.rand(7, 5), torch.rand(7, 5)
        per_head = [torch.mean((t[:, j] - p[:, j]) ** 2) for j in range(5)]
        assert mtl_loss(p, t).item() == pytest.approx(torch.stack(per_head).mean().item())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mtl_loss(torch.zeros(2, 5), torch.zeros(2, 4))


class TestOptimizerRouting:
    @pytest.mark.parametrize("set_to_none", [True, False])
    def test_other_branches_unchanged(self, tiny_net, set_to_none):
        model = build(replace(tiny_net, dropout_p=0.0))
        with torch.no_grad():
            for m in model.modules():
                if isinstance(m, torch.nn.Linear):
                    m.weight.normal_()
        opt = torch.optim.Adam(model.parameters(), lr=1e-2)
        before = [[p.detach().clone() for p in branch_parameters(model, k)] for k in range(5)]
        a, b = torch.rand(4, 3, 32, 32), torch.rand(4, 3, 32, 32)
        opt.zero_grad(set_to_none=set_to_none)
        mtl_loss(model(a, b)[:, 2:3], torch.rand(4, 1)).backward()
        opt.step()
        for k in range(5):
            after = branch_parameters(model, k)
            same = all(torch.equal(x, y) for x, y in zip(before[k], after))
            assert same == (k != 2)


class TestTrain:
    def test_history_and_determinism(self, tiny_data, tiny_net, tmp_path):
        cfg = TrainConfig(seed=3, deterministic=True, **FAST)
        one = train(tiny_data, tiny_net, cfg, run_dir=tmp_path / "one", meta={"config_hash": "h"})
        two = train(tiny_data, tiny_net, cfg, run_dir=tmp_path / "two", meta={"config_hash": "h"})
        assert len(one.history) == 2
        assert (tmp_path / "one" / "history.csv").read_bytes() == (tmp_path / "two" / "history.csv").read_bytes()
        for x, y in zip(one.model.state_dict().values(), two.model.state_dict().values()):
            assert torch.equal(x, y)
        header = (tmp_path / "one" / "history.csv").read_text().splitlines()[0]
        assert header.startswith("epoch,train_loss") and header.endswith("config_hash")

    def test_first_loss_is_target_second_moment(self, tiny_data, tiny_net, monkeypatch):
        seen = []
        real = training.mtl_loss

        def spy(preds, targets):
            loss = real(preds, targets)
            seen.append((loss.item(), float((targets**2).mean())))
            return loss

        monkeypatch.setattr(training, "mtl_loss", spy)
        cfg = TrainConfig(epochs=1, batch_size=64, val_pairs_per_user=3, tail_gamma=0.0, same_sex_fraction=0.0)
        train(tiny_data, tiny_net, cfg)
        first_loss, batch_moment = seen[0]
        assert first_loss == pytest.approx(batch_moment, rel=1e-6)
        view = tiny_data.split("train")
        idx = view.hetero_pairs()
        population = float(np.mean(view.adjusted[idx[:, 0], idx[:, 1]] ** 2))
        assert first_loss == pytest.approx(population, rel=0.25)

    def test_identity_pairs_share_the_crop(self, tiny_net, monkeypatch):
        single = build_dataset(WorldConfig(n_users=60, image_size=48, images_per_user=(1, 1), seed=2))
        seen = []
        real_build = training.build

        def recording_build(cfg):
            model = real_build(cfg)
            model.register_forward_pre_hook(
                lambda m, inputs: seen.append(torch.equal(inputs[0], inputs[1])) if m.training else None
            )
            return model

        monkeypatch.setattr(training, "build", recording_build)
        train(single, tiny_net, TrainConfig(self_identity_fraction=1.0, same_sex_fraction=0.0, **FAST))
        assert seen and all(seen)
        seen.clear()
        train(single, tiny_net, TrainConfig(**FAST))
        assert seen and not any(seen)

    def test_early_stopping(self, tiny_data, tiny_net):
        result = train(tiny_data, tiny_net, TrainConfig(epochs=6, patience=1, batch_size=16, val_pairs_per_user=3))
        assert result.best_epoch <= len(result.history) <= 6
        assert len(result.history) - result.best_epoch <= 1

    def test_non_finite_loss_aborts(self, tiny_data, tiny_net, monkeypatch):
        monkeypatch.setattr(training, "mtl_loss", lambda p, t: (p * float("nan")).sum())
        with pytest.raises(TrainingError, match="non-finite"):
            train(tiny_data, tiny_net, TrainConfig(**FAST))

    def test_crop_size_must_match(self, tiny_data, tiny_net):
        from facesim.crops import CropConfig

        with pytest.raises(ValueError):
            train(tiny_data, tiny_net, TrainConfig(**FAST), CropConfig(out_size=64))


def fake_train(scores):
    def run(data, net, cfg, crop=None, **kw):
        pcc, mae_ = scores[(cfg.lr, cfg.batch_size)]
        if pcc is None:
            raise TrainingError(f"diverged at lr={cfg.lr}")
        row = {"val_pcc_MS": pcc, "val_mae_MS": mae_}
        return TrainResult(None, [row], 1, pcc)

    return run


class TestGridSearch:
    def test_single_point(self, tiny_data, tiny_net):
        cfg = TrainConfig(lr_grid=(1e-3,), bs_grid=(16,), grid_epochs=1, val_pairs_per_user=3)
        best, points = grid_search(tiny_data, tiny_net, cfg)
        assert (best.lr, best.batch_size) == (1e-3, 16)
        assert len(points) == 1

    def test_selection_and_tie_breaks(self, monkeypatch):
        scores = {(1e-3, 16): (0.4, 0.2), (1e-3, 32): (0.5, 0.3), (1e-2, 16): (0.5, 0.3), (1e-2, 32): (0.5, 0.25)}
        monkeypatch.setattr(training, "train", fake_train(scores))
        best, _ = grid_search(None, None, TrainConfig(lr_grid=(1e-3, 1e-2), bs_grid=(16, 32)))
        assert (best.lr, best.batch_size) == (1e-2, 32)
        scores[(1e-2, 32)] = (0.5, 0.3)
        best, _ = grid_search(None, None, TrainConfig(lr_grid=(1e-2, 1e-3), bs_grid=(16, 32)))
        assert best.lr == 1e-3

    def test_all_diverge(self, monkeypatch):
        scores = {(lr, bs): (None, None) for lr in (1e-3, 1e-2) for bs in (32,)}
        monkeypatch.setattr(training, "train", fake_train(scores))
        with pytest.raises(TrainingError) as info:
            grid_search(None, None, TrainConfig(lr_grid=(1e-3, 1e-2), bs_grid=(32,)))
        assert "lr=0.001" in str(info.value) and "lr=0.01" in str(info.value)


class TestProbe:
    def test_reports_metrics(self, tiny_data, tiny_net):
        cfg = TrainConfig(epochs=1, batch_size=16)
        sex = probe_train(tiny_data, "sex_classification", tiny_net, cfg)
        age = probe_train(tiny_data, "age_regression", tiny_net, cfg)
        assert 0 <= sex["accuracy"] <= 1 and sex["n_images"] > 0
        assert age["mae_years"] >= 0 and age["baseline_mae_years"] > 0

    def test_unknown_task(self, tiny_data, tiny_net):
        with pytest.raises(ValueError):
            probe_train(tiny_data, "height", tiny_net, TrainConfig())
