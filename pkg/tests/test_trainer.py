import math

import numpy as np
import pytest

from capsamc import capsnet, dataio, trainer
from capsamc.trainer import TrainConfig
from tiny import tiny_arrays, tiny_config, zero_model


@pytest.fixture(scope="module")
def data():
    return tiny_arrays(60, seed=1)


@pytest.fixture(scope="module")
def splits(data):
    return dataio.split(data.labels, dataio.SplitSpec(0.6, 0.2, 0.2, seed=0))


def run(data, splits, seed=0, **kw):
    cfg = TrainConfig(**{"batch_size": 8, "learning_rate": 0.02, "max_epochs": 3, "seed": seed, **kw})
    return trainer.train(capsnet.build(tiny_config()), data, splits, cfg)


@pytest.mark.parametrize("n,bs,expected", [(10, 3, [3, 3, 4]), (9, 3, [3, 3, 3]), (7, 10, [7]), (1, 4, [1])])
def test_batches_fold_a_lone_tail(n, bs, expected):
    sizes = [s.stop - s.start for s in trainer.batches(n, bs)]
    assert sizes == expected and sum(sizes) == n


def test_step_count_per_epoch(data, splits):
    _, rep = run(data, splits, max_epochs=2)
    n = len(splits.train)
    assert rep.steps == [len(trainer.batches(n, 8))] * 2
    assert rep.steps[0] in (math.ceil(n / 8), math.ceil(n / 8) - 1)


def test_zero_epochs_returns_untrained_copy(data, splits):
    model = capsnet.build(tiny_config())
    best, rep = trainer.train(model, data, splits, TrainConfig(max_epochs=0))
    assert rep.train_loss == [] and rep.best_epoch == -1
    assert all(np.array_equal(best.params[k], model.params[k]) for k in model.params)
    assert best is not model


def test_empty_validation_is_rejected(data, splits):
    bad = dataio.Splits(splits.train, np.array([], dtype=np.int64), splits.test)
    with pytest.raises(ValueError, match="validation"):
        trainer.train(capsnet.build(tiny_config()), data, bad, TrainConfig(max_epochs=1))


def test_first_epoch_lowers_the_loss(data, splits):
    _, rep = run(data, splits, max_epochs=1)
    first, last = rep.batch_loss[0][0], rep.batch_loss[0][-1]
    assert last < first


def test_best_epoch_is_max_accuracy_then_min_loss_and_state_matches(data, splits):
    best, rep = run(data, splits, max_epochs=4, early_stop_patience=10)
    acc = np.array(rep.val_accuracy)
    tied = np.flatnonzero(acc == acc.max())
    assert rep.best_epoch == int(tied[np.argmin(np.array(rep.val_loss)[tied])])
    acc, _ = trainer.evaluate_split(best, data, splits.validation)
    assert acc == rep.best_accuracy
    assert best.provenance["epoch"] == rep.best_epoch


def test_reruns_are_bit_identical(data, splits):
    a, ra = run(data, splits, seed=5, augment="flip")
    b, rb = run(data, splits, seed=5, augment="flip")
    assert ra.reproducible() == rb.reproducible()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    _, rc = run(data, splits, seed=6, augment="flip")
    assert rc.batch_loss != ra.batch_loss


def test_early_stopping_and_schedule(data, splits):
    _, rep = run(data, splits, max_epochs=12, early_stop_patience=1, lr_period=2, lr_decay=0.5)
    assert rep.learning_rate == [0.02 * 0.5 ** (e // 2) for e in range(len(rep.learning_rate))]
    if rep.stopped_early:
        assert len(rep.val_accuracy) - 1 - rep.best_epoch == 1


def test_normalised_input_makes_training_scale_free(data, splits):
    loud = dataio.FrameArrays(data.iq * 7, data.labels, data.snr_db, data.tags)
    a, ra = run(data, splits, max_epochs=1)
    b, rb = run(loud, splits, max_epochs=1)
    assert ra.val_accuracy == rb.val_accuracy
    np.testing.assert_allclose(ra.train_loss, rb.train_loss, rtol=1e-5)


def test_uniform_model_scores_the_first_class_prevalence(data):
    model = zero_model(tiny_config())
    idx = np.arange(len(data))
    acc, per_class = trainer.evaluate_split(model, data, idx)
    truth = trainer.to_model_labels(model.config, data.labels)
    assert acc == float(np.mean(truth == 0))
    assert per_class[0] == 1.0 and np.all(per_class[1:][~np.isnan(per_class[1:])] == 0)


def test_labels_outside_the_model_are_rejected(data):
    cfg = tiny_config(classes=("BPSK", "QPSK"))
    with pytest.raises(ValueError, match="MSK"):
        trainer.to_model_labels(cfg, data.labels)


def test_config_validation():
    for bad in (dict(batch_size=0), dict(early_stop_patience=0), dict(weight_decay=-1), dict(augment="mirror"),
                dict(max_epochs=-1), dict(lr_period=0), dict(learning_rate=0), dict(momentum=1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_flip_augmentation_only_changes_signs(rng):
    x = rng.standard_normal((50, 2, 16)).astype(np.float32)
    y = trainer.augment_batch(x, "flip", np.random.default_rng(0))
    ratio = y / x
    assert np.all(np.isin(np.round(ratio, 6), [-1, 1]))
    assert np.all(ratio == ratio[:, :, :1])
    assert len({tuple(r) for r in ratio[:, :, 0]}) == 4
    assert trainer.augment_batch(x, "none", np.random.default_rng(0)) is x


def test_phase_rotation_keeps_power_and_composes(rng):
    x = rng.standard_normal((5, 2, 32))
    ph = rng.uniform(0, 6, 5)
    y = trainer.rotate_phase(x, ph)
    np.testing.assert_allclose(np.sum(y**2, axis=(1, 2)), np.sum(x**2, axis=(1, 2)))
    np.testing.assert_allclose(trainer.rotate_phase(y, -ph), x, atol=1e-12)
    z = x[:, 0] + 1j * x[:, 1]
    np.testing.assert_allclose(y[:, 0] + 1j * y[:, 1], z * np.exp(1j * ph)[:, None], atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(data, splits):
    with pytest.raises(trainer.TrainingDiverged, match="epoch 0"):
        run(data, splits, learning_rate=1e30, momentum=0.0, max_epochs=1)
