import pytest

from voxelstrip import config as cfgio
from voxelstrip.augment import AugmentConfig
from voxelstrip.errors import ConfigError
from voxelstrip.phantom import PhantomConfig
from voxelstrip.trainer import DESK_TRAIN, TrainConfig
from voxelstrip.unet import DESK_NET, NetConfig


@pytest.mark.parametrize("cfg", [DESK_TRAIN, TrainConfig(), DESK_NET, NetConfig(),
                                 AugmentConfig(), AugmentConfig.disabled(),
                                 PhantomConfig(contrast="mixed", symmetric=True)])
def test_round_trip(cfg, tmp_path):
    cfgio.save(cfg, tmp_path / "x.cfg")
    assert cfgio.load(type(cfg), tmp_path / "x.cfg") == cfg


def test_partial_file_keeps_defaults():
    cfg = cfgio.loads(TrainConfig, "# comment\nepochs = 3  # trailing\n\npatch=32,32,32\n")
    assert cfg.epochs == 3 and cfg.patch == (32, 32, 32) and cfg.alpha0 == TrainConfig().alpha0


def test_overrides_win():
    assert cfgio.loads(TrainConfig, "epochs=3", epochs=5).epochs == 5


@pytest.mark.parametrize("text", ["epoch=3", "epochs", "epochs=three", "symmetric=maybe"])
def test_errors(text):
    cls = PhantomConfig if text.startswith("symmetric") else TrainConfig
    with pytest.raises(ConfigError):
        cfgio.loads(cls, text)


def test_validation_runs_on_load():
    with pytest.raises(ConfigError):
        cfgio.loads(NetConfig, "depth=1")
