import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from drlesion.dataset import load_manifest, split
from drlesion.exceptions import ConfigError, ContractError, TrainingError
from drlesion.imaging import PreprocessConfig
from drlesion.model import ModelConfig, build_model, load_checkpoint
from drlesion.training import (
    Decision,
    EarlyStopState,
    EpochLog,
    TrainConfig,
    binary_cross_entropy,
    early_stopping_step,
    evaluate_loss,
    fit_arrays,
    plot_loss_curve,
    read_epoch_log,
    read_train_config,
    train,
    write_epoch_log,
    write_train_config,
)
from golden import FIXTURE

TINY = ModelConfig(input_side=32, backbone="tiny", pretrained=False, tiny_width=4,
                   aspp_channels=8, decoder_channels=8, decoder_low_level_channels=4, dropout=0.0)


def toy_data(rng, n=4, side=32):
    images = rng.random((n, side, side, 3))
    masks = (images[..., 0] > 0.7).astype(np.uint8)
    return images, masks


def test_table_defaults():
    cfg = TrainConfig()
    assert (cfg.image_size, cfg.batch_size, cfg.max_epochs) == (512, 4, 30)
    assert (cfg.loss, cfg.activation, cfg.optimizer) == ("BinaryCrossentropy", "sigmoid", "Adam")
    assert cfg.learning_rate == 1e-4
    assert (cfg.early_stop_monitor, cfg.early_stop_patience) == ("val_loss", 5)
    assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon, cfg.min_delta) == (0.9, 0.999, 1e-8, 0.0)


@pytest.mark.parametrize("kwargs", [{"optimizer": "SGD"}, {"batch_size": 0}, {"learning_rate": -1.0},
                                    {"early_stop_monitor": "loss"}, {"max_epochs": -1}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(batch_size=2, learning_rate=3e-4, seed=9, restore_best=False)
    write_train_config(tmp_path / "t.txt", cfg)
    text = (tmp_path / "t.txt").read_text()
    assert "epoch = 30" in text and "early_stopping_patience = 5" in text
    assert read_train_config(tmp_path / "t.txt") == cfg


def test_config_file_table_names(tmp_path):
    (tmp_path / "t.txt").write_text("# hyper-parameters\nImage Size = 64\nBatch Size: 2\nEpoch = 3\n"
                                    "Learning Rate = 0.001\nEarly Stopping Patience = 2\n")
    cfg = read_train_config(tmp_path / "t.txt")
    assert (cfg.image_size, cfg.batch_size, cfg.max_epochs, cfg.learning_rate, cfg.early_stop_patience) == (
        64, 2, 3, 1e-3, 2)


@pytest.mark.parametrize("text", ["bogus = 1\n", "epoch = many\n", "no separator\n"])
def test_config_file_errors(tmp_path, text):
    (tmp_path / "t.txt").write_text(text)
    with pytest.raises(ConfigError):
        read_train_config(tmp_path / "t.txt")


def test_bce_examples():
    assert binary_cross_entropy([1.0, 0.0, 1.0], [1, 0, 1]) <= 1e-6
    assert binary_cross_entropy([0.5] * 5, [1, 0, 0, 1, 1]) == pytest.approx(math.log(2), abs=1e-12)
    expected = -(math.log(0.9) + math.log(0.8)) / 2
    assert expected == pytest.approx(0.1643, abs=1e-4)
    assert binary_cross_entropy([0.9, 0.2], [1, 0]) == pytest.approx(expected, abs=1e-12)


def test_bce_clamps_and_checks():
    assert math.isfinite(binary_cross_entropy([0.0, 1.0], [1, 0]))
    assert binary_cross_entropy([0.0], [1]) == pytest.approx(-math.log(1e-7))
    with pytest.raises(ContractError):
        binary_cross_entropy([0.5, 0.5], [1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_bce_matches_torch(pairs):
    p, y = map(np.array, zip(*pairs))
    ref = torch.nn.functional.binary_cross_entropy(
        torch.tensor(np.clip(p, 1e-7, 1 - 1e-7)), torch.tensor(y, dtype=torch.float64)).item()
    value = binary_cross_entropy(p, y)
    assert value >= 0
    assert value == pytest.approx(ref, rel=1e-9, abs=1e-12)


def run_stopper(losses, patience=5):
    state, decisions = EarlyStopState(patience=patience), []
    for v in losses:
        state, d = early_stopping_step(state, v)
        decisions.append(d)
        if d is Decision.STOP:
            break
    return state, decisions


def test_early_stopping_seven_values():
    state, decisions = run_stopper([0.5, 0.4, 0.41, 0.42, 0.43, 0.44, 0.45])
    assert len(decisions) == 7 and decisions[-1] is Decision.STOP
    assert all(d is Decision.CONTINUE for d in decisions[:-1])
    assert state.best_epoch == 2 and state.best_val_loss == 0.4


def test_decreasing_losses_never_stop():
    _, decisions = run_stopper([1.0 - 0.01 * i for i in range(30)])
    assert len(decisions) == 30 and Decision.STOP not in decisions


def test_ties_are_not_improvements():
    state, _ = run_stopper([0.5, 0.5])
    assert state.epochs_since_improvement == 1 and state.best_epoch == 1


def test_non_finite_val_loss():
    with pytest.raises(ContractError):
        early_stopping_step(EarlyStopState(), float("nan"))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=1, max_size=40), st.integers(1, 6))
def test_stops_within_patience_of_last_improvement(losses, patience):
    state, decisions = run_stopper(losses, patience)
    assert state.epochs_since_improvement <= patience
    if decisions[-1] is Decision.STOP:
        assert state.epoch - state.best_epoch == patience
    assert state.best_val_loss == min(losses[: len(decisions)])


def test_epoch_log_io_and_plot(tmp_path):
    logs = [EpochLog(1, 0.7, 0.69, 0.1, True), EpochLog(2, 0.6, 0.65, 0.1, True)]
    write_epoch_log(tmp_path / "log.jsonl", logs)
    assert read_epoch_log(tmp_path / "log.jsonl") == logs
    plot_loss_curve(logs, tmp_path / "curve.png")
    assert (tmp_path / "curve.png").read_bytes()[:4] == b"\x89PNG"


def test_learning_rate_zero_keeps_parameters(rng):
    images, masks = toy_data(rng)
    model = build_model(TINY, seed=0)
    before = {k: v.clone() for k, v in model.named_parameters()}
    cfg = TrainConfig(image_size=32, batch_size=2, max_epochs=1, learning_rate=0.0)
    model, logs = fit_arrays(model, images, masks, images, masks, cfg)
    assert len(logs) == 1
    for k, v in model.named_parameters():
        assert torch.equal(v, before[k]), k


def test_same_seed_same_curves(rng):
    images, masks = toy_data(rng)
    cfg = TrainConfig(image_size=32, batch_size=2, max_epochs=3, learning_rate=1e-3, seed=4)
    runs = []
    for _ in range(2):
        _, logs = fit_arrays(build_model(TINY, seed=1), images, masks, images[:2], masks[:2], cfg)
        runs.append([(e.train_loss, e.val_loss) for e in logs])
    assert runs[0] == runs[1]


def test_restore_best_and_checkpoints(rng, tmp_path):
    images, masks = toy_data(rng, n=6)
    cfg = TrainConfig(image_size=32, batch_size=2, max_epochs=8, learning_rate=3e-2, early_stop_patience=3)
    model, logs = fit_arrays(build_model(TINY, seed=2), images[:4], masks[:4], images[4:], masks[4:], cfg,
                             checkpoint_path=tmp_path / "best.pt")
    assert all(math.isfinite(e.train_loss) and e.train_loss >= 0 and e.val_loss >= 0 for e in logs)
    best = min(logs, key=lambda e: e.val_loss)
    assert evaluate_loss(model, images[4:], masks[4:], 2) == pytest.approx(best.val_loss, rel=1e-6)
    saved = load_checkpoint(tmp_path / "best.pt")
    assert evaluate_loss(saved, images[4:], masks[4:], 2) == pytest.approx(best.val_loss, rel=1e-6)
    assert [e.epoch for e in logs if e.improved][-1] == best.epoch


def test_non_finite_loss_names_batch(rng):
    images, masks = toy_data(rng)
    images[2] = np.nan
    cfg = TrainConfig(image_size=32, batch_size=4, max_epochs=1)
    with pytest.raises(TrainingError, match="img_c"):
        fit_arrays(build_model(TINY, seed=0), images, masks, images, masks, cfg,
                   train_ids=["img_a", "img_b", "img_c", "img_d"])


def test_empty_sets(rng):
    images, masks = toy_data(rng)
    cfg = TrainConfig(image_size=32, max_epochs=1)
    with pytest.raises(ConfigError):
        fit_arrays(build_model(TINY, seed=0), images[:0], masks[:0], images, masks, cfg)
    with pytest.raises(ConfigError):
        fit_arrays(build_model(TINY, seed=0), images, masks, images[:0], masks[:0], cfg)


@pytest.fixture(scope="module")
def fixture_split():
    return split(load_manifest(FIXTURE, "EX"), seed=0)


def test_train_zero_epochs_returns_initial_model(fixture_split):
    model = build_model(TINY, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    out, logs = train(model, fixture_split, TrainConfig(image_size=32, max_epochs=0))
    assert logs == [] and out is model
    assert all(torch.equal(v, before[k]) for k, v in out.state_dict().items())
    assert out.preprocess == PreprocessConfig(image_size=32)


def test_train_on_manifest(fixture_split):
    cfg = TrainConfig(image_size=32, batch_size=2, max_epochs=2, learning_rate=1e-3)
    model, logs = train(build_model(TINY, seed=0), fixture_split, cfg)
    assert [e.epoch for e in logs] == [1, 2]


def test_train_rejects_inconsistent_sizes(fixture_split):
    with pytest.raises(ConfigError):
        train(build_model(TINY, seed=0), fixture_split, TrainConfig(image_size=32),
              PreprocessConfig(image_size=64))
    with pytest.raises(ConfigError):
        train(build_model(TINY, seed=0), fixture_split, TrainConfig(image_size=40))
