import numpy as np
import pytest
import torch

from patchward.core import DataError, RngStream
from patchward.data import make_toy_dataset
from patchward.diffusion import Conditioning
from patchward.toy_model import DenoiserTrainConfig, ToyDenoiser, train_toy_denoiser

TINY = DenoiserTrainConfig(epochs=2, batch_size=8, T=50, base=8, d_cond=8, seed=0)


class TestToyDataset:
    def test_shapes_and_range(self):
        images, labels, names = make_toy_dataset(12, size=16, seed=1)
        assert images.shape == (12, 16, 16, 3)
        assert images.min() >= 0.0 and images.max() <= 1.0
        assert set(labels) == {0, 1, 2, 3}
        assert len(names) == 4

    def test_deterministic(self):
        a, la, _ = make_toy_dataset(6, size=16, seed=5)
        b, lb, _ = make_toy_dataset(6, size=16, seed=5)
        assert np.array_equal(a, b)
        assert np.array_equal(la, lb)


class TestTrainToyDenoiser:
    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            train_toy_denoiser(np.zeros((0, 16, 16, 3)), np.zeros(0), ("a",), TINY)

    def test_label_mismatch_rejected(self):
        images, labels, names = make_toy_dataset(8, size=16, seed=0)
        with pytest.raises(DataError):
            train_toy_denoiser(images, labels[:4], names, TINY)

    def test_single_image_overfit(self):
        # overfit sanity oracle: 200 epochs on one image halves the loss
        images, labels, names = make_toy_dataset(1, size=16, seed=2)
        cfg = DenoiserTrainConfig(epochs=200, batch_size=1, T=50, base=8, d_cond=8, seed=0)
        model = train_toy_denoiser(images, labels, names, cfg)
        assert model.loss_history[-1] <= 0.5 * model.loss_history[0]

    def test_checkpoint_roundtrip_identical(self, tmp_path):
        images, labels, names = make_toy_dataset(8, size=16, seed=3)
        model = train_toy_denoiser(images, labels, names, TINY)
        path = tmp_path / "denoiser.pt"
        model.save(path)
        again = ToyDenoiser.load(path)
        z = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        t = torch.tensor([10])
        cond = Conditioning.empty()
        with torch.no_grad():
            a = model.predict_eps(z, t, cond)
            b = again.predict_eps(z, t, cond)
        assert torch.equal(a, b)
        assert again.schedule.T == model.schedule.T
        assert np.allclose(again.schedule.alpha_bar, model.schedule.alpha_bar)

    def test_conditioning_changes_prediction(self):
        images, labels, names = make_toy_dataset(8, size=16, seed=4)
        model = train_toy_denoiser(images, labels, names, TINY)
        z = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(1))
        t = torch.tensor([25])
        with torch.no_grad():
            empty = model.predict_eps(z, t, Conditioning.empty())
            prompted = model.predict_eps(z, t, model.embed_label(0))
        assert not torch.equal(empty, prompted)

    def test_embed_token_stable_and_class_aware(self):
        images, labels, names = make_toy_dataset(8, size=16, seed=4)
        model = train_toy_denoiser(images, labels, names, TINY)
        a = model.embed_token("adversarial")
        b = model.embed_token("adversarial")
        assert np.array_equal(a, b)
        # class-name tokens hit the learned class table
        with torch.no_grad():
            expected = model.class_embed(torch.tensor([names.index("box")]))[0].numpy()
        assert np.allclose(model.embed_token("box"), expected)
