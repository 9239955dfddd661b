import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hli.config import ConfigError, RunConfig, load_config, write_config


def write(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def test_missing_file_gives_defaults_only_when_none(tmp_path):
    assert load_config(None) == RunConfig()
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.ini")


def test_seed_reaches_dataset_and_training(tmp_path):
    cfg = load_config(write(tmp_path, "[run]\nseed = 7\n"))
    assert cfg.seed == cfg.dataset.seed == cfg.train.seed == 7
    other = cfg.with_seed(3)
    assert other.dataset.seed == other.train.seed == 3


def test_sections_map_onto_nested_configs(tmp_path):
    text = """
[train]
M_t = 24          ; inline comments are allowed
lr_schedule = 4:0.5, 9:0.1
widths = 8,8,16,16
exp_clamp = none

[losses]
lambda_sd_t = 0.25

[erase]
prob = 0.7
fill = zero
"""
    cfg = load_config(write(tmp_path, text))
    assert cfg.train.M_t == 24
    assert cfg.train.lr_schedule == ((4, 0.5), (9, 0.1))
    assert cfg.train.widths == (8, 8, 16, 16)
    assert cfg.train.exp_clamp is None
    assert cfg.train.loss_weights.lambda_sd_t == 0.25
    assert cfg.train.erase.prob == 0.7 and cfg.train.erase.fill == "zero"


@pytest.mark.parametrize(
    "text,field",
    [
        ("[train]\nlearning_rate = -1\n", "train.learning_rate"),
        ("[train]\nlearning_rate = fast\n", "train.learning_rate"),
        ("[train]\nM_t = 4\n", "train.M_t"),
        ("[losses]\nalpha = -0.5\n", "losses.alpha"),
        ("[erase]\nprob = 2\n", "erase.prob"),
        ("[erase]\nerase_h = 100\n", "erase.erase_h"),
        ("[dataset]\nshift_magnitude = 1.5\n", "dataset.shift_magnitude"),
        ("[dataset]\nseed = 3\n", "dataset.seed"),
        ("[train]\nbogus = 1\n", "train.bogus"),
        ("[model]\nwidth = 3\n", "model"),
        ("[run]\nseed = x\n", "run.seed"),
    ],
)
def test_errors_name_the_field(tmp_path, text, field):
    with pytest.raises(ConfigError) as err:
        load_config(write(tmp_path, text))
    assert err.value.field == field
    assert repr(field) in str(err.value)


def test_keys_are_case_sensitive(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "[train]\nm_t = 32\n"))


@given(
    seed=st.integers(0, 10_000),
    lr=st.floats(1e-6, 1.0),
    prob=st.floats(0.0, 1.0),
    sd=st.floats(0.0, 5.0),
    clamp=st.one_of(st.none(), st.floats(0.1, 10.0)),
)
@settings(max_examples=30, deadline=None)
def test_write_then_load_round_trips(tmp_path_factory, seed, lr, prob, sd, clamp):
    base = RunConfig().with_seed(seed)
    train = dataclasses.replace(
        base.train,
        learning_rate=lr,
        exp_clamp=clamp,
        erase=dataclasses.replace(base.train.erase, prob=prob),
        loss_weights=dataclasses.replace(base.train.loss_weights, lambda_sd_t=sd),
    )
    cfg = dataclasses.replace(base, train=train)
    path = write_config(cfg, tmp_path_factory.mktemp("cfg") / "run.ini")
    assert load_config(path) == cfg
