import numpy as np
import pytest

from tiacam.augment import AugmentorParams, ParamBounds, apply_photometric
from tiacam.autodiff import backward
from tiacam.errors import ConfigError, NonFiniteError
from tiacam.features import sample_pair_batch
from tiacam.trainer import (
    METRIC_COLUMNS,
    TrainConfig,
    augmentor_objective,
    load_checkpoint,
    pretrain_augmentor,
    read_sections,
    save_checkpoint,
    step_augmentor,
    step_discriminator,
    step_extractor,
    train,
    write_metrics,
)

from toy import directional_checks, small_config, toy_setup


def _snapshot(state):
    return {
        "theta": {k: v.copy() for k, v in state.theta.state_dict().items() if not k.startswith("buffer:")},
        "psi": state.psi.state_dict(),
        "aug": state.aug.state_dict(),
    }


def _same(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def toy():
    return toy_setup(small_config())


def _batch(toy, seed=0):
    state, ds, anchors = toy
    return sample_pair_batch(anchors, ds, state.config.batch_size, np.random.default_rng(seed))


# ---------------------------------------------------------------- config


@pytest.mark.parametrize(
    "bad",
    [{"lr": 0.0}, {"lr": -1.0}, {"lambda_adv": -0.1}, {"n_d": 0}, {"precision": "f16"}, {"augmentor_init": "x"}],
)
def test_config_rejects_invalid(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_unknown_key_and_round_trip():
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(lr=1e-3, bounds={"sigma_max": 0.05})
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.digest() == cfg.digest()
    assert TrainConfig(seed=1).digest() != cfg.digest()


def test_defaults():
    cfg = TrainConfig()
    assert cfg.lr == 1e-4 and cfg.betas == (0.9, 0.999) and cfg.adam_eps == 1e-8
    assert (cfg.n_d, cfg.n_a, cfg.n_f) == (1, 1, 1)
    assert cfg.lambda_adv == 1.0 and cfg.lambda_sem == 1.0


# ---------------------------------------------------------------- phase steps


@pytest.mark.parametrize("phase", ["discriminator", "augmentor", "extractor"])
def test_zero_lr_keeps_parameters_and_advances_counter(phase):
    state, ds, anchors = toy_setup(small_config())
    for opt in (state.opt_d, state.opt_a, state.opt_f):
        opt.lr = 0.0
    before = _snapshot(state)
    step = {"discriminator": step_discriminator, "augmentor": step_augmentor, "extractor": step_extractor}[phase]
    step(state, _batch((state, ds, anchors)))
    after = _snapshot(state)
    assert state.step == 1
    assert all(_same(before[k], after[k]) for k in before)


@pytest.mark.parametrize(
    "phase, moved",
    [("discriminator", "psi"), ("augmentor", "aug"), ("extractor", "theta")],
)
def test_phase_isolation(phase, moved):
    state, ds, anchors = toy_setup(small_config())
    before = _snapshot(state)
    step = {"discriminator": step_discriminator, "augmentor": step_augmentor, "extractor": step_extractor}[phase]
    step(state, _batch((state, ds, anchors)))
    after = _snapshot(state)
    for key in before:
        if key == moved:
            assert not _same(before[key], after[key])
        else:
            assert _same(before[key], after[key]), key


def test_stop_gradient_in_augmentor_phase(toy):
    state = toy[0]
    batch = _batch(toy)
    obj, _ = augmentor_objective(state, batch, np.random.default_rng(0))
    grads = backward(obj)
    for p in state.theta.parameters():
        assert not np.any(grads.get(p.id, np.zeros(1)))
    assert any(np.any(grads[p.id]) for p in state.aug.learnable())
    # the loss itself does depend on theta
    w = state.theta.head2.fc.weight
    old = w.data.copy()
    w.data = old * 1.5
    try:
        moved = augmentor_objective(state, batch, np.random.default_rng(0))[0].item()
    finally:
        w.data = old
    assert moved != obj.item()


def test_clamp_holds_after_every_augmentor_step():
    state, ds, anchors = toy_setup(small_config(lr_augmentor=0.5))
    b = ParamBounds()
    for i in range(3):
        step_augmentor(state, _batch((state, ds, anchors), i))
        a = state.aug
        assert np.all(np.abs(a.A.data - np.eye(3)) <= b.geo_max_dev + 1e-12)
        assert np.all((a.photo_alpha.data >= 0.7) & (a.photo_alpha.data <= 1.3))
        assert 0 <= a.noise_sigma.item() <= b.sigma_max and 0 <= a.sp_rate.item() <= b.sp_max
        assert np.all((a.mask.data >= 0) & (a.mask.data <= 1))
        assert 1 <= a.quant_sharpness.item() <= 20


def test_non_finite_gradient_names_phase():
    state, ds, anchors = toy_setup(small_config())
    state.theta.input.fc.weight.data[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="extractor phase at step 0"):
        step_extractor(state, _batch((state, ds, anchors)))


@pytest.mark.parametrize("seed", range(5))
def test_extractor_step_is_a_descent_step(seed):
    assert directional_checks(seed)[1]


@pytest.mark.parametrize("seed", range(5))
def test_augmentor_step_ascends_in_the_smooth_regime(seed):
    # compression in pass-through mode removes the quantiser's jumps
    assert directional_checks(seed, augmentor_init="identity")[0]


# ---------------------------------------------------------------- training loop


def test_zero_rounds_is_identity():
    state, ds, anchors = toy_setup(small_config())
    before = _snapshot(state)
    state, log = train(state, ds, anchors, rounds=0)
    assert log == [] and state.round == 0
    assert all(_same(before[k], _snapshot(state)[k]) for k in before)


def test_replay_gives_identical_metrics(tmp_path):
    paths = []
    for i in range(2):
        state, ds, anchors = toy_setup(small_config(seed=3))
        p = tmp_path / f"m{i}.csv"
        train(state, ds, anchors, rounds=3, metrics_path=p)
        paths.append(p.read_bytes())
    assert paths[0] == paths[1]
    lines = paths[0].decode().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[2] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 3 + 3


def test_manual_training_mode_logs_all_columns():
    state, ds, anchors = toy_setup(small_config(learn_augmentor=False))
    before = state.aug.state_dict()
    _, log = train(state, ds, anchors, rounds=2)
    assert set(log[0]) == set(METRIC_COLUMNS)
    assert _same(before, state.aug.state_dict())


def test_checkpoint_round_trip_continues_bit_identically(tmp_path):
    state, ds, anchors = toy_setup(small_config(seed=5))
    train(state, ds, anchors, rounds=2)
    save_checkpoint(state, tmp_path / "a.ckpt")
    _, log_a = train(state, ds, anchors, rounds=2)
    restored = load_checkpoint(tmp_path / "a.ckpt")
    _, log_b = train(restored, ds, anchors, rounds=2)
    assert log_a == log_b
    assert all(_same(_snapshot(state)[k], _snapshot(restored)[k]) for k in ("theta", "psi", "aug"))


def test_checkpoint_sections_and_truncation(tmp_path):
    state, _, _ = toy_setup(small_config())
    path = tmp_path / "c.ckpt"
    save_checkpoint(state, path)
    sections = read_sections(path)
    assert {"config", "config_hash", "theta", "psi", "augmentor", "optimizers", "rng"} <= set(sections)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(Exception, match="truncated section"):
        read_sections(path)


def test_metrics_writer_records_lambdas(tmp_path):
    cfg = small_config(lambda_sem=0.25)
    write_metrics(tmp_path / "m.csv", [], cfg)
    assert "lambda_sem=0.25" in (tmp_path / "m.csv").read_text()


# ---------------------------------------------------------------- pretraining


def test_pretrain_zero_pairs_keeps_params():
    start = AugmentorParams.default((16, 16))
    params, report = pretrain_augmentor("photometric", ("photometric", 0.5), pairs=0, params=start, image_size=16)
    assert report["steps"] == 0
    assert all(np.array_equal(params.state_dict()[k], start.state_dict()[k]) for k in start.state_dict())


def test_pretrain_recovers_identity():
    start = AugmentorParams.identity((16, 16))
    start.photo_alpha.data[:] = 1.2
    start.photo_beta.data[:] = -0.05
    params, report = pretrain_augmentor(
        "photometric", lambda x, rng: x, pairs=400, params=start, image_size=16, lr=1e-2, epochs=2
    )
    assert report["final_mse"] < 1e-4
    assert np.allclose(params.photo_alpha.data, 1.0, atol=0.02)


def test_pretrain_recovers_photometric_target():
    target = dict(alpha=1.5, beta=0.05, gamma=1.0)

    def fn(x, rng):
        return apply_photometric(x, target["alpha"], target["gamma"], target["beta"]).data

    bounds = ParamBounds(alpha_range=(0.5, 2.0))
    params, _ = pretrain_augmentor("photometric", fn, pairs=800, bounds=bounds, image_size=16, lr=2e-2, epochs=4)
    assert np.allclose(params.photo_alpha.data, 1.5, rtol=0.05)
    assert np.allclose(params.photo_beta.data, 0.05, rtol=0.05)
    assert np.allclose(params.photo_gamma.data, 1.0, rtol=0.05)


def test_pretrain_unknown_module():
    with pytest.raises(ConfigError, match="valid modules"):
        pretrain_augmentor("blur", ("filtering", 0.5))
