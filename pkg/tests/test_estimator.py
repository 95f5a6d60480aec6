import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cdcn.estimator import CDCNDeblurrer, check_image_batch, check_paired_batches
from cdcn.training import save_checkpoint

TINY = dict(base_channels=4, resblocks=1, mid_channels=4, epochs=2, batch_size=2, patch_size=32, lr=1e-3)


@pytest.fixture(scope="module")
def pairs():
    rng = np.random.default_rng(0)
    sharp = rng.random((2, 32, 32, 3))
    blurred = (sharp + np.roll(sharp, 1, axis=2) + np.roll(sharp, -1, axis=2)) / 3
    return blurred, sharp


@pytest.fixture(scope="module")
def fitted(pairs):
    return CDCNDeblurrer(**TINY).fit(*pairs)


class TestValidation:
    def test_uint8_rescaled(self):
        out = check_image_batch(np.full((4, 4, 3), 255, dtype=np.uint8))
        assert out.shape == (1, 4, 4, 3) and out.dtype == np.float64 and out.max() == 1.0

    def test_list_input(self):
        assert check_image_batch([np.zeros((4, 4, 3))] * 2).shape == (2, 4, 4, 3)

    @pytest.mark.parametrize("bad", [np.zeros((4, 4)), np.zeros((1, 4, 4, 4)), np.zeros((0, 4, 4, 3)),
                                     np.full((1, 4, 4, 3), np.nan), np.full((1, 4, 4, 3), 1.5)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            check_image_batch(bad)

    def test_min_size(self):
        with pytest.raises(ValueError, match="at least"):
            check_image_batch(np.zeros((1, 4, 4, 3)), min_size=8)

    def test_pair_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            check_paired_batches(np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 5, 3)))


class TestEstimatorApi:
    def test_get_params_and_clone(self):
        est = CDCNDeblurrer(base_channels=4, no_reblur=True)
        params = est.get_params()
        assert params["base_channels"] == 4 and params["no_reblur"] is True
        twin = clone(est)
        assert twin is not est and twin.get_params() == params

    def test_set_params(self):
        assert CDCNDeblurrer().set_params(lr=0.5).lr == 0.5

    def test_predict_before_fit(self):
        with pytest.raises(NotFittedError):
            CDCNDeblurrer().predict(np.zeros((1, 32, 32, 3)))

    def test_images_smaller_than_patch(self):
        with pytest.raises(ValueError, match="patch_size"):
            CDCNDeblurrer(**{**TINY, "patch_size": 64}).fit(np.zeros((1, 32, 32, 3)), np.zeros((1, 32, 32, 3)))


class TestFitted:
    def test_fit_attributes(self, fitted):
        assert len(fitted.train_log_.records) == 2
        assert fitted.checkpoint_.step == 2

    def test_predict_shape_and_range(self, fitted, pairs):
        out = fitted.predict(pairs[0])
        assert out.shape == pairs[0].shape and out.min() >= 0 and out.max() <= 1

    def test_transform_matches_predict(self, fitted, pairs):
        assert np.array_equal(fitted.transform(pairs[0]), fitted.predict(pairs[0]))

    def test_score_is_psnr(self, fitted, pairs):
        score = fitted.score(*pairs)
        assert np.isfinite(score) and score > 0

    def test_refit_deterministic(self, pairs, fitted):
        again = CDCNDeblurrer(**TINY).fit(*pairs)
        assert again.train_log_.to_jsonl() == fitted.train_log_.to_jsonl()

    def test_estimate_kernels(self, fitted, pairs):
        fields = fitted.estimate_kernels(pairs[0])
        assert len(fields) == 2 and fields[0].offsets.shape[-2:] == (8, 8)

    def test_checkpoint_round_trip(self, fitted, pairs, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", fitted.checkpoint_)
        loaded = CDCNDeblurrer.from_checkpoint(tmp_path / "m.ckpt")
        assert loaded.get_params() == fitted.get_params()
        assert np.allclose(loaded.predict(pairs[0]), fitted.predict(pairs[0]), atol=1e-6)

    def test_ablation_from_checkpoint(self, pairs):
        est = CDCNDeblurrer(**{**TINY, "epochs": 0, "one_level": True}).fit(*pairs)
        back = CDCNDeblurrer.from_checkpoint(est.checkpoint_)
        assert back.one_level and back.levels == 2 and back.model_.config.levels == 1
