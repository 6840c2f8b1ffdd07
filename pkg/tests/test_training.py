from dataclasses import replace

import numpy as np
import pytest

from ctxmod.errors import ConfigError, DataError, NumericError
from ctxmod.synth import Dataset, load_dataset
from ctxmod.training import (STAGES, TrainConfig, incremental_pipeline, job_seed, load_ctl_into_fcl, run_jobs,
                             simultaneous, stage_slug, train, transfer)
from ctxmod.zoo import BlockSpec, ModelSpec, build, load, preset

FAST = TrainConfig(max_epochs=1, batch_size=64, seed=3)


@pytest.fixture(scope="module")
def ds(tiny_dataset):
    return load_dataset(tiny_dataset)


def _linear_dataset(n_train=400, n_val=200, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=64)
    x = rng.random((n_train + n_val, 1, 8, 8)).astype(np.float32)
    y = (x.reshape(len(x), -1) @ w + 0.3).astype(np.float32)[:, None]
    return Dataset(x[:n_train], x[n_train:], y[:n_train], y[n_train:])


SMALL_FCL = ModelSpec("fcl8", 1, (BlockSpec("fcl"),), input_shape=(1, 8, 8))


def test_learns_a_linear_target():
    data = _linear_dataset()
    model = build(SMALL_FCL, seed=0)
    model, rep = train(model, data, 0, TrainConfig(lr=0.02, batch_size=32, max_epochs=60, patience=10))
    assert rep.val_corr > 0.99
    assert rep.history[-1]["train_loss"] < rep.history[1]["train_loss"]


def test_all_frozen_model_does_not_move():
    data = _linear_dataset()
    model = build(SMALL_FCL, seed=0)
    model.freeze(model.named_parameters())
    before = model.state_dict()
    _, rep = train(model, data, 0, TrainConfig(max_epochs=3))
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert rep.epochs_run == 0


def test_training_is_deterministic(ds):
    states = []
    for _ in range(2):
        m, _ = simultaneous("rf-CNN", ds, 1, FAST, channels=6)
        states.append(m.state_dict())
    for k in states[0]:
        np.testing.assert_array_equal(states[0][k], states[1][k])


def test_only_unfrozen_parameters_move(ds):
    m = build(preset("rf-CNN", 6), seed=1)
    frozen = m.freeze_blocks(["alpha"])
    before = m.state_dict()
    m, rep = train(m, ds, 0, FAST)
    after = m.state_dict()
    assert sorted(frozen) == rep.frozen
    for k in before:
        if k in frozen:
            np.testing.assert_array_equal(after[k], before[k])
    assert any(not np.array_equal(after[k], before[k]) for k in before if k not in frozen)


def test_masked_entries_do_not_move():
    m = build(SMALL_FCL, seed=2)
    key = "0.readout.weight"
    trainable = np.random.default_rng(0).random((1, 64)) < 0.5
    m.masks[key] = trainable
    before = m.state_dict()[key].copy()
    m, rep = train(m, _linear_dataset(), 0, TrainConfig(lr=0.02, batch_size=32, max_epochs=5))
    after = m.state_dict()[key]
    assert rep.best_epoch > 0
    np.testing.assert_array_equal(after[~trainable], before[~trainable])
    assert np.all(after[trainable] != before[trainable])


def test_fraction_shrinks_the_training_set(ds):
    _, rep = simultaneous("rf-CNN", ds, 0, replace(FAST, fraction=0.25), channels=4)
    assert rep.n_train == 60
    with pytest.raises(ConfigError):
        simultaneous("rf-CNN", ds, 0, replace(FAST, fraction=1.5), channels=4)


def test_non_finite_targets_abort(ds):
    bad = replace(ds, responses_train=ds.responses_train.copy())
    bad.responses_train[3, 0] = np.nan
    with pytest.raises(NumericError):
        simultaneous("rf-CNN", bad, 0, FAST, channels=4)
    with pytest.raises(DataError):
        simultaneous("rf-CNN", ds, 9, FAST, channels=4)


@pytest.fixture(scope="module")
def pipeline(ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("incr")
    snapshots = {}

    def grab(stage, model):
        snapshots[stage] = (model.state_dict(), model.predict(ds.images_val[:10]))

    stages = incremental_pipeline(ds, 2, FAST, out_dir=out, channels=6, callback=grab)
    return stages, snapshots, out


def test_pipeline_stages_and_checkpoints(pipeline):
    stages, _, out = pipeline
    assert list(stages) == list(STAGES)
    for stage, (model, rep) in stages.items():
        assert rep.checkpoint and (out / f"{stage_slug(stage)}.ckpt").is_file()
        reloaded = load(rep.checkpoint)
        assert reloaded.frozen() == model.frozen()


def _block_state(model, kinds):
    return [p.data for b in model.blocks if b.kind in kinds for p in b.params.values()]


def test_frozen_blocks_are_bit_identical(pipeline):
    stages, _, _ = pipeline
    rf, sa, fc1, fc2 = (stages[s][0] for s in STAGES)
    for a, b in zip(_block_state(rf, ["alpha"]), _block_state(sa, ["alpha"])):
        np.testing.assert_array_equal(a, b)
    for later in (fc1, fc2):
        for a, b in zip(_block_state(sa, ["alpha", "sa", "beta"]), _block_state(later, ["alpha", "sa", "beta"])):
            np.testing.assert_array_equal(a, b)
    rep_sa = stages[STAGES[1]][1]
    assert all(".alpha." in k for k in rep_sa.frozen)
    assert not any(".readout." in k for k in stages[STAGES[3]][1].frozen)


def test_fc1_keeps_the_ctl_center(pipeline):
    stages, _, _ = pipeline
    sa, fc1 = stages[STAGES[1]][0], stages[STAGES[2]][0]
    ci, cj = fc1.readout.center
    np.testing.assert_array_equal(fc1.readout.weight_grid()[:, ci, cj], sa.readout.params["weight"].data[0])


def test_fc1_starts_at_the_stage2_function(pipeline, ds):
    stages, snaps, _ = pipeline
    sa = stages[STAGES[1]][0]
    _, pred_init = snaps[STAGES[2] + ":init"]
    np.testing.assert_allclose(pred_init, sa.predict(ds.images_val[:10]), atol=1e-6)


def test_fc2_gets_a_fresh_readout(pipeline):
    stages, snaps, _ = pipeline
    init_state, _ = snaps[STAGES[3] + ":init"]
    key = f"{len(stages[STAGES[3]][0].blocks) - 1}.readout.weight"
    surround = ~stages[STAGES[2]][0].readout.center_mask()
    assert np.any(init_state[key][surround] != 0)


def test_simultaneous_has_nothing_frozen(ds):
    m, rep = simultaneous("rf+sa-CNN*", ds, 0, FAST, channels=6)
    assert rep.frozen == [] and not any(m.frozen().values())


def test_stage_handoff_errors():
    a = build(preset("rf-CNN", 6))
    b = build(preset("rf+sa-CNN*", 8))
    with pytest.raises(Exception, match="channel mismatch"):
        transfer(a, b, ["alpha"])
    with pytest.raises(ConfigError):
        load_ctl_into_fcl(build(preset("ff-CNN", 6)), build(preset("ff+sa-CNN*", 6)))


def _square(x):
    return x * x


def test_run_jobs_keeps_submission_order():
    args = [(i,) for i in range(7)]
    assert run_jobs(_square, args, jobs=1) == [i * i for i in range(7)]
    assert run_jobs(_square, args, jobs=2) == [i * i for i in range(7)]
    assert job_seed(5, 3) == job_seed(5, 3) and job_seed(5, 3) != job_seed(5, 4)
