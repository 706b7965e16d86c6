from pathlib import Path

import pytest
import yaml

from geossl.config import ConfigError, build_config, config_from_dict, load_config, preset_defaults


class TestPaperPreset:
    def test_simclr(self):
        cfg = build_config({"preset": "paper"})
        assert (cfg.batch_size, cfg.epochs, cfg.warmup_epochs) == (256, 100, 10)
        assert (cfg.optimizer.name, cfg.optimizer.lr) == ("adam", 3e-4)
        assert cfg.optimizer.weight_decay == 1e-6
        assert cfg.temperature == 0.5

    def test_byol(self):
        cfg = build_config({"preset": "paper", "method": "byol"})
        o = cfg.optimizer
        assert (o.name, o.lr, o.momentum, o.weight_decay) == ("sgd", 0.03, 0.9, 4e-4)
        assert (cfg.batch_size, cfg.epochs, cfg.warmup_epochs) == (256, 100, 10)

    def test_linear_eval(self):
        e = build_config({"preset": "paper"}).eval
        assert (e.batch_size, e.lr, e.epochs) == (64, 3e-4, 200)


class TestDeskPreset:
    def test_defaults(self):
        cfg = build_config()
        assert (cfg.batch_size, cfg.epochs, cfg.warmup_epochs, cfg.eval.epochs) == (64, 20, 2, 50)
        assert cfg.checkpoint_every == 10 and cfg.lam == 1.0 and cfg.tau == 0.99
        assert cfg.module == "affine" and cfg.placement == "on_f" and not cfg.two_modules


class TestOverrides:
    def test_precedence(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"epochs": 7, "optimizer": {"lr": 0.01}}))
        cfg = load_config(path, ["epochs=3"])
        assert cfg.epochs == 3 and cfg.optimizer.lr == 0.01 and cfg.optimizer.name == "adam"

    def test_nested_list(self):
        assert build_config(None, ["b2.rotation=[-10, 10]"]).b2_config().rotation == (-10, 10)

    @pytest.mark.parametrize("bad", [["method=moco"], ["module=none", "loss_variant=concat"],
                                     ["warmup_epochs=20"], ["tau=2"], ["nope=1"], ["epochs"],
                                     ["loss_variant=invariant", "placement=on_g"]])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            build_config(None, bad)

    def test_round_trip(self):
        cfg = build_config(None, ["method=byol", "module=shear", "regression_kind=logcosh"])
        assert config_from_dict(yaml.safe_load(cfg.to_yaml())) == cfg

    def test_preset_unknown(self):
        with pytest.raises(ConfigError):
            preset_defaults("simclr", "huge")

    def test_b2_section(self):
        assert build_config(None, ["module=none"]).b2_config() is None
        assert build_config(None, ["module=homography", "b2.perspective=0.8"]).b2_config().perspective == 0.8


@pytest.mark.parametrize("path", sorted((Path(__file__).parents[1] / "experiments").glob("*.yaml")),
                         ids=lambda p: p.stem)
def test_experiment_configs_valid(path):
    cfg = build_config(yaml.safe_load(path.read_text()), [])
    assert cfg.validate() is cfg
