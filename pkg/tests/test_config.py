import pytest

from vidcontrast.config import (
    EvalConfig,
    TrainConfig,
    config_hash,
    dump_config,
    load_config,
    parse_config_text,
    train_config_from_dict,
)
from vidcontrast.errors import ConfigError


def test_defaults_are_the_reference_run():
    cfg = TrainConfig()
    assert (cfg.n_videos, cfg.n_classes, cfg.epochs, cfg.seed) == (320, 16, 30, 42)
    assert cfg.steps_per_epoch == 10 and cfg.total_steps == 300 and cfg.warmup_steps == 50


def test_parse_values_and_comments():
    text = """
    # comment
    epochs = 4   # trailing
    warmup_epochs = 1
    conv_strides = 1, 2
    base_lr = 0.1
    conv_channels = 4, 8
    track_nn_quality = false
    mode = non_momentum
    recall_ks = 1, 3
    """
    train, ev = parse_config_text(text)
    assert train.epochs == 4 and train.base_lr == 0.1 and train.conv_channels == (4, 8)
    assert train.track_nn_quality is False and train.mode == "non_momentum"
    assert ev.recall_ks == (1, 3)


@pytest.mark.parametrize("text, line", [
    ("epochs = 3\nbogus = 1\n", 2),
    ("epochs = 3\n\nepochs = 4\n", 3),
    ("epochs = three\n", 1),
    ("\n\njust words\n", 3),
])
def test_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=f"line {line}:"):
        parse_config_text(text)


def test_semantic_validation():
    with pytest.raises(ConfigError):
        parse_config_text("warmup_epochs = 30\n")
    with pytest.raises(ConfigError):
        TrainConfig(mode="sideways")
    with pytest.raises(ConfigError):
        EvalConfig(test_fraction=1.0)
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.txt")


def test_dump_round_trip_and_hash(tmp_path):
    train, ev = TrainConfig(epochs=7, conv_channels=(2, 3), conv_strides=(1, 2)), EvalConfig(fewshot_fractions=(0.5,))
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(train, ev))
    assert load_config(path) == (train, ev)
    assert config_hash(train, ev) == config_hash(*load_config(path))
    assert config_hash(train, ev) != config_hash(TrainConfig(), ev)


def test_from_dict():
    assert train_config_from_dict({"epochs": 2, "warmup_epochs": 1, "head_dims": [4, 2]}).head_dims == (4, 2)
    with pytest.raises(ConfigError):
        train_config_from_dict({"nope": 1})
