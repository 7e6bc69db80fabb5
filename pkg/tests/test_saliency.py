import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from PIL import Image

from facesim.net import GuidedReLU, build
from facesim.saliency import (
    SaliencyConfig,
    SaliencyError,
    export_map,
    guided_backprop,
    head_index,
    head_names,
    read_map,
    saliency_maps,
    smoothgrad,
)
from facesim.seeding import substream


class ToyPair(torch.nn.Module):
    """relu(x - 0.5) per pixel, then a fixed linear read-out per head."""

    def __init__(self, weights):
        super().__init__()
        self.config = SimpleNamespace(in_size=weights.shape[-1])
        self.n_outputs = weights.shape[0]
        self.relu = GuidedReLU()
        self.w = weights

    def embed(self, x):
        return self.relu(x - 0.5)

    def head(self, fa, fb):
        return torch.einsum("nchw,kchw->nk", fa + fb, self.w)


def expected_map(x, w, guided):
    active = (x > 0.5).astype(float)
    w = np.maximum(w, 0) if guided else w
    return np.abs(active * w[None]).max(axis=1)


@pytest.fixture
def images():
    gen = torch.Generator().manual_seed(3)
    return torch.rand(2, 3, 8, 8, generator=gen), torch.rand(2, 3, 8, 8, generator=gen)


class TestGuidedBackprop:
    def test_non_negative_weights_give_plain_gradient(self, images):
        w = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(0))
        a, b = images
        map_a, map_b = guided_backprop(ToyPair(w), a, b, "M2")
        np.testing.assert_allclose(map_a, expected_map(a.numpy(), w[1].numpy(), False), rtol=1e-6)
        np.testing.assert_allclose(map_b, expected_map(b.numpy(), w[1].numpy(), False), rtol=1e-6)

    def test_negative_gradients_are_blocked(self, images):
        w = torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(1))
        a, b = images
        map_a, _ = guided_backprop(ToyPair(w), a, b, "M1")
        np.testing.assert_allclose(map_a, expected_map(a.numpy(), w[0].numpy(), True), rtol=1e-6)

    def test_mean_head(self, images):
        w = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(2))
        a, b = images
        map_a, _ = guided_backprop(ToyPair(w), a, b, "MS")
        np.testing.assert_allclose(map_a, expected_map(a.numpy(), w.mean(0).numpy(), False), rtol=1e-5)

    def test_guided_flag_restored(self, images):
        model = ToyPair(torch.ones(1, 3, 8, 8))
        guided_backprop(model, *images, "M1")
        assert model.relu.guided is False

    def test_zero_heads_give_zero_maps(self, tiny_net):
        model = build(tiny_net)
        a, b = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
        for head in head_names(model):
            map_a, map_b = guided_backprop(model, a, b, head)
            assert map_a.shape == (2, 32, 32)
            assert not map_a.any() and not map_b.any()

    def test_real_network_maps_are_finite(self, tiny_net):
        model = build(tiny_net)
        with torch.no_grad():
            for m in model.modules():
                if isinstance(m, torch.nn.Linear):
                    m.weight.normal_()
        a, b = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
        map_a, map_b = guided_backprop(model, a, b, "M3")
        assert np.isfinite(map_a).all() and (map_a >= 0).all() and map_a.any()


class TestHeads:
    def test_names(self, tiny_net):
        assert head_names(build(tiny_net)) == ("M1", "M2", "M3", "M4", "M5", "MS")

    @pytest.mark.parametrize("bad", ["M6", "ms", 5, -1])
    def test_unknown_head(self, tiny_net, bad):
        with pytest.raises(SaliencyError):
            head_index(build(tiny_net), bad)

    def test_error_lists_valid_heads(self, tiny_net):
        with pytest.raises(SaliencyError, match="M1, M2, M3, M4, M5, MS"):
            head_index(build(tiny_net), "M9")


def square_attribution(a, b):
    return a[:, 0].numpy() ** 2, b[:, 0].numpy()


class TestSmoothGrad:
    def test_zero_noise_is_bitwise_single_pass(self, images):
        cfg = SaliencyConfig(n_samples=7, noise_scale=0.0)
        got = smoothgrad(square_attribution, *images, cfg)
        once = square_attribution(*images)
        assert all(np.array_equal(g, o.astype(np.float64)) for g, o in zip(got, once))

    def test_single_sample_is_one_perturbed_input(self, images):
        a, b = images
        cfg = SaliencyConfig(n_samples=1, noise_scale=0.2, seed=5)
        got_a, got_b = smoothgrad(square_attribution, a, b, cfg)
        rng = substream(5, "smoothgrad")
        noisy = [x + 0.2 * (x.flatten(1).amax(1) - x.flatten(1).amin(1)).view(-1, 1, 1, 1)
                 * torch.from_numpy(rng.standard_normal(tuple(x.shape)).astype(np.float32)) for x in (a, b)]
        want_a, want_b = square_attribution(*noisy)
        np.testing.assert_allclose(got_a, want_a, rtol=1e-6)
        np.testing.assert_allclose(got_b, want_b, rtol=1e-6)
        assert not np.allclose(got_a, a[:, 0].numpy() ** 2)

    def test_unbiased_for_square(self, images):
        a, b = images
        n, scale = 400, 0.2
        got_a, got_b = smoothgrad(square_attribution, a, b, SaliencyConfig(n_samples=n, noise_scale=scale))
        x = a[:, 0].numpy().astype(np.float64)
        sigma = scale * (a.flatten(1).amax(1) - a.flatten(1).amin(1)).numpy()[:, None, None]
        # x + sigma z squared has mean x^2 + sigma^2 and variance 4 x^2 sigma^2 + 2 sigma^4
        expected = x**2 + sigma**2
        se = np.sqrt((4 * x**2 * sigma**2 + 2 * sigma**4) / n)
        z = (got_a - expected) / se
        assert np.mean(np.abs(z) < 3) > 0.98
        assert abs(z.mean()) < 3 / np.sqrt(z.size)
        # identity attribution averages to the input
        np.testing.assert_allclose(got_b, b[:, 0].numpy(), atol=6 * sigma.max() / np.sqrt(n))

    def test_variance_shrinks_with_samples(self, images):
        def spread(n):
            runs = [smoothgrad(square_attribution, *images, SaliencyConfig(n_samples=n, noise_scale=0.2, seed=s))[1]
                    for s in range(30)]
            return np.var(np.stack(runs), axis=0, ddof=1).mean()

        ratio = spread(10) / spread(100)
        assert 6 < ratio < 16

    def test_seeded(self, images):
        cfg = SaliencyConfig(n_samples=3)
        one = smoothgrad(square_attribution, *images, cfg)
        two = smoothgrad(square_attribution, *images, cfg)
        assert all(np.array_equal(x, y) for x, y in zip(one, two))

    @pytest.mark.parametrize("bad", [dict(n_samples=0), dict(noise_scale=-0.1), dict(target_image="c")])
    def test_invalid_config(self, bad):
        with pytest.raises(SaliencyError):
            SaliencyConfig(**bad)


class TestMaps:
    def test_target_selection(self, tiny_net):
        model = build(tiny_net)
        a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
        both = saliency_maps(model, a, b, SaliencyConfig(n_samples=2))
        only_b = saliency_maps(model, a, b, SaliencyConfig(n_samples=2, target_image="b"))
        assert set(both) == {"a", "b"} and set(only_b) == {"b"}
        assert only_b["b"].shape == (1, 32, 32)

    def test_bad_head_before_any_work(self, tiny_net):
        with pytest.raises(SaliencyError):
            saliency_maps(build(tiny_net), torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32),
                          SaliencyConfig(head="M0"))


class TestExport:
    def test_round_trip(self, tmp_path, rng):
        values = rng.random((12, 10)).astype(np.float32)
        png, raw, header = export_map(tmp_path, "pair_a", values)
        assert raw.stat().st_size == 12 * 10 * 4
        assert np.array_equal(read_map(raw), values)
        assert np.array_equal(np.frombuffer(raw.read_bytes(), dtype="<f4").reshape(12, 10), values)
        meta = json.loads(header.read_text())
        assert meta == {"shape": [12, 10], "dtype": "float32", "byte_order": "little"}
        with Image.open(png) as img:
            assert img.size == (10, 12) and img.mode == "RGB"

    def test_zero_map_exports(self, tmp_path):
        png, raw, _ = export_map(tmp_path, "zero", np.zeros((4, 4)))
        assert not read_map(raw).any()
        with Image.open(png) as img:
            assert len(np.unique(np.asarray(img).reshape(-1, 3), axis=0)) == 1
