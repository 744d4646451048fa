import numpy as np
import pytest

from tiacam.errors import ConfigError, DataError
from tiacam.evaluation import (
    HELD_OUT,
    Report,
    eval_ablation_augmentor,
    eval_bits,
    eval_invariance,
    eval_pair_separation,
    fit_linear_probe,
    linear_probe,
    pair_separation,
    random_signature_accuracy,
    svg_bar_chart,
    topk_accuracy,
)

from toy import small_config, toy_setup


@pytest.fixture(scope="module")
def toy():
    state, ds, _ = toy_setup(small_config(), n=16)
    return state, ds


def test_report_csv_layout():
    rep = Report("x", ("a", "b"), [{"a": "p", "b": 0.1234567}], "h", 3, ["note"])
    assert rep.to_csv() == "# report=x\n# config_hash=h\n# seed=3\n# note\na,b\np,0.123457\n"


def test_zero_severity_gives_unit_cosine(toy):
    state, ds = toy
    rep = eval_invariance(ds, state.pipeline, ("all", "jpeg"), severity=0.0)
    assert np.allclose(rep.column("mean_cos"), 1.0, atol=1e-5)
    assert rep.column("n") == [16, 16]


def test_invariance_is_deterministic_and_annotated(toy):
    state, ds = toy
    a = eval_invariance(ds, state.pipeline, n=8, seed=4, config_hash="h").to_csv()
    b = eval_invariance(ds, state.pipeline, n=8, seed=4, config_hash="h").to_csv()
    assert a == b and "annotation only" in a
    assert eval_invariance(ds, state.pipeline, n=8, seed=5, config_hash="h").to_csv() != a


def test_unknown_profile(toy):
    state, ds = toy
    with pytest.raises(ConfigError, match="valid profiles"):
        eval_invariance(ds, state.pipeline, ("sepia",))


def test_pair_separation_oracles():
    F = np.random.default_rng(0).normal(size=(5, 8))
    out = pair_separation(F, F, -F)
    assert out["positive"] == pytest.approx(1.0) and out["negative"] == pytest.approx(-1.0)


def test_pair_separation_needs_two_classes(toy):
    state, ds = toy
    one = ds.subset(np.flatnonzero(np.asarray(ds.labels) == 0))
    with pytest.raises(DataError, match="two classes"):
        eval_pair_separation(one, state.pipeline)


def test_identity_profile_bits_are_exact(toy):
    state, ds = toy
    rep = eval_bits(ds, state.pipeline, ks=(30,), profiles=("identity",), n=6)
    reg = [r for r in rep.rows if r["method"] == "registered"][0]
    assert reg["bit_acc"] == 1.0 and reg["n"] + reg["failures"] == 6
    ctrl = [r for r in rep.rows if r["method"] == "control"][0]
    assert 0.2 <= ctrl["bit_acc"] <= 0.8


def test_random_signature_control_is_chance():
    F = np.random.default_rng(1).normal(size=(10, 16))
    assert abs(random_signature_accuracy(F, 100, 50) - 0.5) <= 0.1


def test_ablation_identical_checkpoints_have_zero_delta(toy):
    state, ds = toy
    cfg = state.config
    rep = eval_ablation_augmentor(ds, state.pipeline, state.pipeline, cfg, cfg, HELD_OUT, n=4)
    assert all(r["delta"] == 0 and r["higher"] == "tie" for r in rep.rows)
    assert all(r["n"] == 4 for r in rep.rows)
    assert len(rep.rows) == 2 * len(HELD_OUT)


def test_ablation_budget_mismatch(toy):
    state, ds = toy
    other = small_config(rounds=7)
    with pytest.raises(ConfigError, match="rounds"):
        eval_ablation_augmentor(ds, state.pipeline, state.pipeline, state.config, other)
    # augmentor learnability is the one allowed difference
    eval_ablation_augmentor(ds, state.pipeline, state.pipeline, state.config,
                            small_config(learn_augmentor=False), ("jpeg",), n=2)


def test_probe_on_one_hot_features():
    y = np.repeat(np.arange(4), 5)
    X = np.eye(4)[y]
    W, b = fit_linear_probe(X, y, 4)
    assert topk_accuracy(X @ W + b, y, 1) == 1.0


def test_probe_on_permuted_labels_is_near_chance():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 200)
    X = rng.normal(size=(800, 8))
    W, b = fit_linear_probe(X[:400], rng.permutation(y)[:400], 4)
    assert abs(topk_accuracy(X[400:] @ W + b, y[400:], 1) - 0.25) < 0.08


def test_probe_warns_with_few_classes(toy):
    state, ds = toy
    with pytest.warns(UserWarning, match="top-5"):
        out = linear_probe(ds, state.pipeline, epochs=20)
    assert out["top5"] == 1.0 and out["n_train"] + out["n_test"] == len(ds)


def test_evaluation_does_not_mutate_inputs(toy):
    state, ds = toy
    images = ds.images.copy()
    digest = state.pipeline.digest()
    eval_invariance(ds, state.pipeline, ("all",), n=4)
    eval_bits(ds, state.pipeline, profiles=("all",), n=2)
    assert np.array_equal(images, ds.images) and state.pipeline.digest() == digest


def test_svg_chart():
    rep = Report("x", ("profile", "mean_cos"), [{"profile": "jpeg", "mean_cos": 0.5}], "h", 0)
    svg = svg_bar_chart(rep, "profile", ["mean_cos"], "t")
    assert svg.startswith("<svg") and "jpeg" in svg and svg.rstrip().endswith("</svg>")
