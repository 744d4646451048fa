import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiacam.errors import ConfigError, ConvergenceError, DataError, ShapeError
from tiacam.watermark import (
    WatermarkSignature,
    as_message,
    bit_accuracy,
    encode_feature,
    extract,
    extract_from_feature,
    format_bits,
    parse_bits,
    predict_bits,
    read_signature,
    register,
    threshold,
    write_signature,
)


# ---------------------------------------------------------------- encode / predict


def test_encode_identity_projection_on_vector():
    F = np.arange(5.0)
    assert np.array_equal(encode_feature(np.eye(5), F), F)


def test_encode_pools_a_constant_map():
    F = np.broadcast_to(np.array([1.0, -2.0, 3.0]), (2, 2, 3))
    assert np.allclose(encode_feature(np.eye(3), F), [1.0, -2.0, 3.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_encode_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    psi, F1, F2 = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)
    lhs = encode_feature(psi, a * F1 + b * F2)
    assert np.allclose(lhs, a * encode_feature(psi, F1) + b * encode_feature(psi, F2), atol=1e-10)


def test_encode_dim_mismatch():
    with pytest.raises(ShapeError):
        encode_feature(np.eye(3), np.ones(4))


def test_predict_examples():
    ft = np.array([0.3, -1.2, 2.0])
    assert np.allclose(predict_bits(np.zeros((2, 3)), ft), 0.5)
    C = (10 * ft / (ft @ ft))[None]
    assert predict_bits(C, ft)[0] == pytest.approx(0.9999546, abs=1e-7)
    rng = np.random.default_rng(0)
    C = rng.normal(size=(7, 3))
    assert np.allclose(predict_bits(-C, ft), 1 - predict_bits(C, ft))


def test_threshold_tie_goes_to_one():
    assert threshold(np.array([0.5, 0.4999999, 0.5000001])).tolist() == [1, 0, 1]


def test_bit_accuracy_examples():
    w = np.random.default_rng(0).integers(0, 2, 30)
    assert bit_accuracy(w, w) == 1.0
    assert bit_accuracy(w, 1 - w) == 0.0
    flipped = w.copy()
    flipped[[1, 7, 20]] ^= 1
    assert bit_accuracy(w, flipped) == pytest.approx(0.9)
    with pytest.raises(ShapeError):
        bit_accuracy(w, w[:-1])


def test_message_and_bit_parsing():
    assert parse_bits("a5").tolist() == [1, 0, 1, 0, 0, 1, 0, 1]
    assert parse_bits("0x3").tolist() == [0, 0, 1, 1]
    assert parse_bits("random:30", np.random.default_rng(1)).size == 30
    assert format_bits([1, 0, 1]) == "101"
    for bad in ("zz", "random:0", "random:x"):
        with pytest.raises(ConfigError):
            parse_bits(bad)
    with pytest.raises(ValueError):
        as_message([0, 2])


# ---------------------------------------------------------------- registration


def test_one_dimensional_logistic_oracle():
    history = []
    sig = register(np.array([1.0]), [1], d=1, lambda_c=0.0, eta=0.5, steps=5000, history=history)
    assert sig.C[0, 0] * sig.psi[0, 0] > 0
    assert predict_bits(sig.C, encode_feature(sig.psi, [1.0]))[0] > 0.95
    assert np.all(np.diff(history) <= 1e-15)


def test_large_regulariser_prevents_convergence():
    F = np.random.default_rng(0).normal(size=32)
    bits = np.random.default_rng(1).integers(0, 2, 30)
    with pytest.raises(ConvergenceError, match="registration did not converge: BCE"):
        register(F, bits, lambda_c=1e3, steps=50)


@pytest.mark.parametrize("seed", range(5))
def test_bce_is_monotone_at_small_step(seed):
    rng = np.random.default_rng(seed)
    history = []
    register(rng.normal(size=32), rng.integers(0, 2, 30), eta=1e-2, steps=20000, seed=seed, history=history)
    assert np.all(np.diff(history) <= 1e-12)


@pytest.mark.parametrize("k", [30, 100])
def test_registration_reproduces_message(k):
    rng = np.random.default_rng(k)
    F, bits = rng.normal(size=64), rng.integers(0, 2, k)
    sig = register(F, bits, image_id="img", checkpoint="abc")
    got, probs = extract_from_feature(sig, F)
    assert np.array_equal(got, bits) and sig.k == k and sig.d == 64
    assert sig.metadata["final_bce"] < 0.05 and sig.metadata["self_check"] == "pass"
    # positive rescaling of the feature keeps every bit
    assert np.array_equal(extract_from_feature(sig, 3.7 * F)[0], bits)


def test_registration_does_not_mutate_feature():
    F = np.random.default_rng(0).normal(size=16)
    before = F.copy()
    register(F, [1, 0, 1])
    assert np.array_equal(F, before)


def test_registration_rejects_bad_config():
    with pytest.raises(ConfigError):
        register(np.ones(4), [1], steps=0)
    with pytest.raises(ConfigError):
        register(np.ones(4), [1], eta=0.0)


def test_unregistered_signature_is_at_chance():
    rng = np.random.default_rng(0)
    accs = []
    for t in range(50):
        F_reg, F_other = rng.normal(size=64), rng.normal(size=64)
        bits = rng.integers(0, 2, 100)
        sig = register(F_reg, bits, seed=t)
        other_bits = rng.integers(0, 2, 100)
        accs.append(bit_accuracy(other_bits, extract_from_feature(sig, F_other)[0]))
    assert 0.4 <= np.mean(accs) <= 0.6


# ---------------------------------------------------------------- files and pipelines


def test_signature_file_round_trip(tmp_path):
    F = np.random.default_rng(3).normal(size=20)
    sig = register(F, [1, 0, 0, 1, 1], d=8, image_id="a", checkpoint="deadbeef")
    path = tmp_path / "s.tiwm"
    write_signature(path, sig)
    back = read_signature(path)
    assert np.array_equal(back.C, sig.C) and np.array_equal(back.psi, sig.psi)
    assert back.metadata == sig.metadata
    assert path.read_bytes()[:4] == b"TIWM"


def test_signature_file_errors(tmp_path):
    path = tmp_path / "s.tiwm"
    write_signature(path, WatermarkSignature(np.zeros((2, 3)), np.zeros((3, 4)), {"x": 1}))
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DataError, match="byte 0"):
        read_signature(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:30])
    with pytest.raises(DataError, match="truncated"):
        read_signature(tmp_path / "short")


class _Pipe:
    def __init__(self, tag, scale=1.0):
        self.tag, self.scale = tag, scale

    def digest(self):
        return self.tag

    def features(self, image):
        class _T:
            data = self.scale * np.asarray(image, dtype=np.float64).reshape(-1)[:12]
        return _T()


def test_extract_checks_pipeline_digest():
    image = np.random.default_rng(0).uniform(size=(2, 2, 3))
    pipe = _Pipe("one")
    bits = np.array([1, 1, 0, 1])
    sig = register(pipe.features(image).data, bits, d=8, checkpoint="one")
    assert np.array_equal(extract(sig, image, pipe)[0], bits)
    with pytest.raises(ConfigError, match="registered with pipeline"):
        extract(sig, image, _Pipe("two"))
