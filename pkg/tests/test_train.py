import dataclasses

import numpy as np
import pytest

from solarseg import (
    ModelParams,
    NumericError,
    RunHistory,
    ShapeMismatchError,
    TrainConfig,
    ValidationError,
    adam_step,
    evaluate,
    finetune,
    init_adam,
    init_params,
    load_mask,
    pretrain,
    transfer_params,
)
from solarseg.model import ENCODER_PREFIXES, PROJECTION_PREFIX

from conftest import MICRO_ARCH, micro_train_config


def adam_oracle(theta, grads_seq, lr, b1, b2, eps):
    """Textbook bias-corrected Adam, one tensor, applied to a list of grads."""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    out = theta.copy()
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        out = out - lr * mhat / (np.sqrt(vhat) + eps)
    return out


def scalar_params(value=1.0):
    return ModelParams(tensors={"w": np.array([value], dtype=np.float64)})


# -- optimizer -------------------------------------------------------------


def test_train_config_validation():
    micro_train_config().validate()
    for bad in (
        {"batch_size": 0},
        {"lr": 0.0},
        {"beta1": 1.0},
        {"beta2": -0.1},
        {"epochs": -1},
        {"threshold": 1.0},
    ):
        with pytest.raises(ValidationError):
            dataclasses.replace(micro_train_config(), **bad).validate()


def test_adam_zero_grad_is_noop():
    params = scalar_params(3.5)
    state = init_adam(params)
    adam_step(params, {"w": np.zeros(1)}, state, TrainConfig())
    assert params["w"][0] == 3.5
    assert state.t == 1


def test_adam_first_step_scalar_value():
    params = scalar_params(1.0)
    adam_step(params, {"w": np.ones(1)}, init_adam(params), TrainConfig())
    assert abs(params["w"][0] - (1.0 - 2.99999997e-5)) <= 1e-12


def test_adam_matches_oracle_over_steps(rng):
    theta0 = rng.normal(size=(4, 3))
    grads_seq = [rng.normal(size=(4, 3)) for _ in range(7)]
    config = TrainConfig(lr=1e-2)
    params = ModelParams(tensors={"w": theta0.copy()})
    state = init_adam(params)
    for g in grads_seq:
        adam_step(params, {"w": g}, state, config)
    want = adam_oracle(theta0, grads_seq, config.lr, config.beta1, config.beta2, config.adam_eps)
    assert float(np.abs(params["w"] - want).max()) <= 1e-12


def test_adam_first_step_is_gradient_scale_invariant(rng):
    g = rng.normal(size=(5,))
    config = TrainConfig(adam_eps=0.0)
    a = ModelParams(tensors={"w": np.zeros(5)})
    b = ModelParams(tensors={"w": np.zeros(5)})
    adam_step(a, {"w": g}, init_adam(a), config)
    adam_step(b, {"w": 100.0 * g}, init_adam(b), config)
    assert float(np.abs(a["w"] - b["w"]).max()) <= 1e-9


def test_adam_updates_in_place_and_skips_missing(rng):
    params = init_params(MICRO_ARCH, 0)
    before_ids = {n: id(t) for n, t in params.tensors.items()}
    head_before = params["head.w"].copy()
    enc_before = params["enc0.conv1.w"].copy()
    grads = {"enc0.conv1.w": np.ones_like(params["enc0.conv1.w"])}
    adam_step(params, grads, init_adam(params), TrainConfig())
    assert all(id(params.tensors[n]) == before_ids[n] for n in params.tensors)
    assert np.array_equal(params["head.w"], head_before)
    assert not np.array_equal(params["enc0.conv1.w"], enc_before)


def test_adam_rejects_nonfinite_grad_by_name():
    params = scalar_params()
    bad = {"w": np.array([np.nan])}
    with pytest.raises(NumericError, match="w"):
        adam_step(params, bad, init_adam(params), TrainConfig())


# -- pretraining -----------------------------------------------------------


def test_pretrain_zero_epochs_returns_init(micro_dataset):
    config = micro_train_config(epochs=0)
    params, history = pretrain(micro_dataset, MICRO_ARCH, config)
    fresh = init_params(MICRO_ARCH, config.seed)
    assert all(np.array_equal(params[n], fresh[n]) for n in fresh.tensors)
    assert history.kind == "pretrain"
    assert history.epochs == []


def test_pretrain_deterministic(micro_dataset):
    config = micro_train_config(epochs=2)
    p1, h1 = pretrain(micro_dataset, MICRO_ARCH, config)
    p2, h2 = pretrain(micro_dataset, MICRO_ARCH, config)
    assert all(np.array_equal(p1[n], p2[n]) for n in p1.tensors)
    assert h1.core() == h2.core()


def test_pretrain_seed_changes_result(micro_dataset):
    p1, _ = pretrain(micro_dataset, MICRO_ARCH, micro_train_config(epochs=1, seed=0))
    p2, _ = pretrain(micro_dataset, MICRO_ARCH, micro_train_config(epochs=1, seed=1))
    assert any(not np.array_equal(p1[n], p2[n]) for n in p1.tensors)


def test_pretrain_loss_decreases(micro_dataset):
    config = micro_train_config(epochs=6, lr=1e-3)
    _, history = pretrain(micro_dataset, MICRO_ARCH, config)
    losses = [r["loss"] for r in history.epochs]
    assert losses[-1] < losses[0]
    assert all(np.isfinite(losses))


def test_pretrain_drops_partial_batch(micro_dataset):
    # 10 train items, batch 4: two full batches, tail of 2 dropped
    _, history = pretrain(micro_dataset, MICRO_ARCH, micro_train_config(epochs=1))
    assert history.epochs[0]["batches"] == 2
    _, history = pretrain(micro_dataset, MICRO_ARCH, micro_train_config(epochs=1, batch_size=8))
    assert history.epochs[0]["batches"] == 1


def test_pretrain_requires_a_full_batch(micro_dataset):
    with pytest.raises(ValidationError):
        pretrain(micro_dataset, MICRO_ARCH, micro_train_config(batch_size=16))


def test_pretrain_numeric_error_names_epoch_and_batch(micro_dataset, monkeypatch):
    import solarseg.train as train_mod

    def poisoned(params, batch, cache=None):
        return np.full((batch.shape[0], MICRO_ARCH.embed_dim), np.nan)

    monkeypatch.setattr(train_mod, "forward_embed", poisoned)
    with pytest.raises(NumericError, match=r"pretrain epoch 0, batch 0"):
        pretrain(micro_dataset, MICRO_ARCH, micro_train_config(epochs=1))


# -- weight transfer -------------------------------------------------------


def test_transfer_params_copies_encoder_and_projection_only():
    pretrained = init_params(MICRO_ARCH, 11)
    out = transfer_params(MICRO_ARCH, pretrained, seed=22)
    fresh = init_params(MICRO_ARCH, 22)
    carried = ENCODER_PREFIXES + (PROJECTION_PREFIX,)
    for name in out.tensors:
        if name.startswith(carried):
            assert np.array_equal(out[name], pretrained[name]), name
        else:
            assert np.array_equal(out[name], fresh[name]), name


def test_transfer_params_rejects_shape_mismatch():
    pretrained = init_params(MICRO_ARCH, 0)
    bigger = dataclasses.replace(MICRO_ARCH, base_width=8)
    with pytest.raises(ShapeMismatchError):
        transfer_params(bigger, pretrained, seed=0)


# -- fine-tuning -----------------------------------------------------------


def test_finetune_keeps_partial_batch(micro_dataset):
    # 10 labeled train items, batch 4: 4 + 4 + 2
    _, history = finetune(micro_dataset, MICRO_ARCH, micro_train_config(epochs=1))
    assert history.epochs[0]["batches"] == 3


def test_finetune_tracks_best_val_epoch(micro_dataset):
    config = micro_train_config(epochs=3, lr=1e-3)
    params, history = finetune(micro_dataset, MICRO_ARCH, config)
    vals = [r["val_iou"] for r in history.epochs]
    assert history.best_val_iou == max(vals)
    assert history.best_epoch == vals.index(max(vals))
    # returned weights really are the best-epoch snapshot
    report = evaluate(params, micro_dataset, "val", config.threshold, config.batch_size)
    assert abs(report.iou - history.best_val_iou) <= 1e-12


def test_finetune_zero_epochs(micro_dataset):
    config = micro_train_config(epochs=0)
    params, history = finetune(micro_dataset, MICRO_ARCH, config)
    fresh = init_params(MICRO_ARCH, config.seed)
    assert all(np.array_equal(params[n], fresh[n]) for n in fresh.tensors)
    assert history.best_val_iou is None
    assert history.epochs == []


def test_finetune_deterministic(micro_dataset):
    config = micro_train_config(epochs=2)
    p1, h1 = finetune(micro_dataset, MICRO_ARCH, config)
    p2, h2 = finetune(micro_dataset, MICRO_ARCH, config)
    assert all(np.array_equal(p1[n], p2[n]) for n in p1.tensors)
    assert h1.core() == h2.core()


def test_finetune_uses_pretrained_init(micro_dataset):
    pre, _ = pretrain(micro_dataset, MICRO_ARCH, micro_train_config(epochs=1))
    config = micro_train_config(epochs=1)
    scratch, _ = finetune(micro_dataset, MICRO_ARCH, config)
    warm, _ = finetune(micro_dataset, MICRO_ARCH, config, init=pre)
    assert any(not np.array_equal(scratch[n], warm[n]) for n in scratch.tensors)


def test_finetune_numeric_error_names_epoch_and_batch(micro_dataset, monkeypatch):
    import solarseg.train as train_mod

    def poisoned(params, batch, cache=None):
        return np.full((batch.shape[0], 1) + batch.shape[2:], np.nan)

    monkeypatch.setattr(train_mod, "forward_segment", poisoned)
    with pytest.raises(NumericError, match=r"finetune epoch 0, batch 0"):
        finetune(micro_dataset, MICRO_ARCH, micro_train_config(epochs=1))


# -- evaluation ------------------------------------------------------------


def test_evaluate_zero_head_matches_hand_computation(micro_dataset):
    # probs are exactly 0.5 everywhere, threshold 0.5 predicts all ones,
    # so IoU reduces to (total positive pixels) / (total pixels)
    params = init_params(MICRO_ARCH, 0)
    params.tensors["head.w"][:] = 0.0
    params.tensors["head.b"][:] = 0.0
    report = evaluate(params, micro_dataset, "test", threshold=0.5)
    masks = [
        load_mask(micro_dataset.items[i].mask_path) for i in micro_dataset.splits["test"]
    ]
    positives = sum(int(m.sum()) for m in masks)
    total = sum(m.size for m in masks)
    assert report.iou == positives / total
    assert report.counts.tp == positives
    assert report.counts.fp == total - positives
    assert report.counts.fn == 0 and report.counts.tn == 0


def test_evaluate_preserves_manifest_order(micro_dataset):
    params = init_params(MICRO_ARCH, 0)
    report = evaluate(params, micro_dataset, "val", batch_size=2)
    assert [i for i, _ in report.per_item] == list(micro_dataset.splits["val"])


def test_evaluate_batch_size_does_not_change_result(micro_dataset):
    params = init_params(MICRO_ARCH, 3)
    a = evaluate(params, micro_dataset, "test", batch_size=1)
    b = evaluate(params, micro_dataset, "test", batch_size=7)
    assert a.iou == b.iou
    assert a.counts.as_dict() == b.counts.as_dict()


def test_evaluate_rejects_bad_split(micro_dataset):
    params = init_params(MICRO_ARCH, 0)
    with pytest.raises(ValidationError):
        evaluate(params, micro_dataset, "holdout")


def test_evaluate_rejects_unlabeled_items(micro_dataset):
    params = init_params(MICRO_ARCH, 0)
    crippled = dataclasses.replace(micro_dataset)
    first = crippled.splits["test"][0]
    crippled.items = dict(crippled.items)
    crippled.items[first] = dataclasses.replace(crippled.items[first], mask_path=None)
    with pytest.raises(ValidationError, match="unlabeled"):
        evaluate(params, crippled, "test")


def test_run_history_core_drops_wall_clock():
    h = RunHistory(kind="finetune", epochs=[{"epoch": 0}], wall_ms=123.0)
    assert "wall_ms" not in h.core()
    assert h.core()["epochs"] == [{"epoch": 0}]
