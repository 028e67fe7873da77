import pytest

from bevocc.config import DEFAULTS, default_config, parse_config
from bevocc.errors import ConfigError
from bevocc.network import CNN, LAR, SS2D, SS2D_1DIR


def test_defaults_round_trip():
    cfg = default_config()
    assert parse_config(cfg.format()) == cfg
    assert cfg.model.grid.shape == (8, 8, 4)
    assert cfg.model.encoder.group_kinds == ((LAR, SS2D),) * 3


def test_comments_and_whitespace():
    cfg = parse_config("# header\n\n  encoder.variant = CNN-CNN   # inline\n")
    assert cfg.model.encoder.group_kinds == ((CNN, CNN),) * 3


@pytest.mark.parametrize(
    "text",
    [
        "encoder.kind=CNN",
        "nonsense",
        "train.steps=1\ntrain.steps=2",
        "train.steps=abc",
        "train.lr=-1",
        "encoder.variant=CNN-MLP",
        "encoder.channels=32,16,64",
        "lar.mode=zigzag",
        "lar.mode=one-to-one",  # kernel 3 is not valid for one entry
        "ssm.n_dirs=2",
        "model.head_channels=15",
        "grid.cell=0.3",
        "encoder.pe=maybe",
        "bench.kind=fast",
        "model.depth=1,6",
        "scene.image=32,30",
    ],
)
def test_rejections(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_every_ablation_switch_is_reachable():
    assert parse_config("encoder.variant=SS2D-SS2D").model.encoder.group_kinds[0] == (SS2D, SS2D)
    assert parse_config("encoder.variant=CNN-SS2D").model.encoder.group_kinds[0] == (CNN, SS2D)
    assert parse_config("encoder.variant=LAR-SS2D*").model.encoder.group_kinds[0] == (LAR, SS2D_1DIR)
    assert parse_config("ssm.n_dirs=1").model.encoder.group_kinds[0] == (LAR, SS2D_1DIR)
    mode = parse_config("lar.mode=one-to-one\nlar.kernel=1").model.encoder.lar_mode
    assert (mode.kind, mode.kernel) == ("one-to-one", 1)
    assert parse_config("lar.kernel=5").model.encoder.lar_mode.kernel == 5
    assert parse_config("temporal.enabled=true").model.temporal


def test_overrides():
    cfg = default_config().with_overrides(**{"train.seed": 7, "scene.seed": 7})
    assert cfg.train.seed == 7 and cfg.scene.seed == 7
    with pytest.raises(ConfigError):
        default_config().with_overrides(**{"train.nope": 1})


def test_keys_are_sectioned():
    assert all("." in k for k in DEFAULTS)
