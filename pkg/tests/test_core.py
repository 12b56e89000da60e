import numpy as np
import pytest

from patchward.core import (
    DefenseConfig,
    ParamError,
    RangeError,
    RngStream,
    ShapeError,
    config_hash,
    defense_config_from_file,
    load_image_png,
    make_schedule,
    ratio_to_step,
    save_image_png,
    validate_image,
)


class TestValidateImage:
    def test_identity_on_valid(self):
        img = np.zeros((8, 8, 3))
        out = validate_image(img)
        assert out is img

    def test_out_of_range_pixel(self):
        img = np.zeros((8, 8, 3))
        img[0, 0, 0] = 1.5
        with pytest.raises(RangeError):
            validate_image(img)

    def test_bad_channel_count(self):
        with pytest.raises(ShapeError):
            validate_image(np.zeros((8, 8, 4)))

    def test_nan_rejected(self):
        img = np.zeros((4, 4, 1))
        img[1, 1, 0] = np.nan
        with pytest.raises(RangeError):
            validate_image(img)

    def test_wrong_ndim(self):
        with pytest.raises(ShapeError):
            validate_image(np.zeros((8, 8)))


class TestSchedule:
    def test_hand_product_t2(self):
        sched = make_schedule(2, 0.1, 0.1)
        assert np.allclose(sched.beta, [0.1, 0.1])
        assert np.allclose(sched.alpha_bar, [0.9, 0.81])

    def test_cumprod_oracle_t1000(self):
        sched = make_schedule(1000, 1e-4, 0.02)
        # independent recomputation of the cumulative product
        expected = []
        acc = 1.0
        for b in np.linspace(1e-4, 0.02, 1000):
            acc *= 1.0 - b
            expected.append(acc)
        assert np.allclose(sched.alpha_bar, expected, rtol=0, atol=1e-15)
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.alpha_bar[0] > 0.999
        assert sched.alpha_bar[-1] < 1e-3

    def test_param_errors(self):
        with pytest.raises(ParamError):
            make_schedule(2, 0.2, 0.1)  # beta_min > beta_max
        with pytest.raises(ParamError):
            make_schedule(1, 0.1, 0.2)
        with pytest.raises(ParamError):
            make_schedule(10, 0.0, 0.2)


class TestRatioToStep:
    def test_endpoints(self):
        sched = make_schedule(1000, 1e-4, 0.02)
        assert ratio_to_step(0.0, sched) == 0
        assert ratio_to_step(1.0, sched) == 999

    def test_midpoint_formula(self):
        sched = make_schedule(1000, 1e-4, 0.02)
        # round(0.5 * 999) with round-half-up
        assert ratio_to_step(0.5, sched) == 500

    def test_out_of_range(self):
        sched = make_schedule(10, 0.01, 0.02)
        with pytest.raises(ParamError):
            ratio_to_step(1.5, sched)
        with pytest.raises(ParamError):
            ratio_to_step(-0.1, sched)


class TestRngStream:
    def test_identical_key_identical_draws(self):
        a = RngStream(7, ("img", 3)).normal((4, 4))
        b = RngStream(7, ("img", 3)).normal((4, 4))
        assert np.array_equal(a, b)

    def test_children_differ(self):
        root = RngStream(7)
        a = root.child("a").normal(8)
        b = root.child("b").normal(8)
        assert not np.array_equal(a, b)

    def test_order_independent(self):
        # deriving children in different orders yields the same streams
        r1 = RngStream(3)
        first = r1.child(1).normal(4)
        second = r1.child(2).normal(4)
        r2 = RngStream(3)
        second_again = r2.child(2).normal(4)
        first_again = r2.child(1).normal(4)
        assert np.array_equal(first, first_again)
        assert np.array_equal(second, second_again)

    def test_torch_seed_stable(self):
        assert RngStream(5, "x").torch_seed() == RngStream(5, "x").torch_seed()


class TestDefenseConfig:
    def test_defaults_valid(self):
        cfg = DefenseConfig()
        assert cfg.t_star == 0.5
        assert cfg.reps == 3

    def test_invariants(self):
        with pytest.raises(ParamError):
            DefenseConfig(reps=0)
        with pytest.raises(ParamError):
            DefenseConfig(tau_bin=1.0)
        with pytest.raises(ParamError):
            DefenseConfig(sigma_smooth=-1.0)
        with pytest.raises(ParamError):
            DefenseConfig(dilate_radius=-1)

    def test_yaml_roundtrip(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("defense:\n  t_star: 0.4\n  reps: 2\n  inpaint_steps: 10\n")
        cfg = defense_config_from_file(path)
        assert cfg.t_star == 0.4
        assert cfg.reps == 2
        assert cfg.inpaint_steps == 10

    def test_unknown_key_rejected(self):
        with pytest.raises(ParamError):
            DefenseConfig.from_dict({"nope": 1})

    def test_config_hash_stable(self):
        cfg = DefenseConfig()
        assert config_hash(cfg.to_dict()) == config_hash(DefenseConfig().to_dict())
        assert config_hash(cfg.to_dict()) != config_hash(DefenseConfig(t_star=0.4).to_dict())


class TestPngIO:
    def test_roundtrip_rgb(self, tmp_path):
        rng = np.random.default_rng(0)
        img = np.round(rng.uniform(size=(9, 7, 3)) * 255) / 255.0
        path = tmp_path / "img.png"
        save_image_png(path, img)
        back = load_image_png(path)
        assert back.shape == img.shape
        assert np.allclose(back, img, atol=1 / 255.0 + 1e-12)

    def test_roundtrip_gray(self, tmp_path):
        img = np.linspace(0, 1, 16).reshape(4, 4, 1)
        path = tmp_path / "g.png"
        save_image_png(path, img)
        back = load_image_png(path)
        assert back.shape == (4, 4, 1)
