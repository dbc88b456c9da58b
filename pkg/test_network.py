import json
import math
import re

import numpy as np
import pytest

from errors import ConsistencyError, CorpusFormatError, NumericError
from feature_service import compute_std_vector, mel_filterbank, mel_warp
from loss_service import pit_mse
from network_service import (
    FORGET_BIAS,
    ModelConfig,
    ParameterStore,
    apply_preset,
    asr_forward,
    backward,
    blstm_forward,
    enh_forward,
    expected_shapes,
    grad_check,
    init_parameters,
    joint_forward,
    load_checkpoint,
    load_std_vector,
    lstm_forward,
    model_forward,
    save_checkpoint,
)
from training_service import loss_objectives
from conftest import make_utterance


def scalar_lstm(W, U, b, x):
    """Element-by-element LSTM recurrence (gate order i, f, o, g)."""
    steps, width = x.shape
    hidden = U.shape[0]
    h = [0.0] * hidden
    c = [0.0] * hidden
    outputs = []
    for t in range(steps):
        z = []
        for j in range(4 * hidden):
            acc = b[j]
            for k in range(width):
                acc += x[t, k] * W[k, j]
            for k in range(hidden):
                acc += h[k] * U[k, j]
            z.append(acc)
        new_h = []
        for k in range(hidden):
            i = 1.0 / (1.0 + math.exp(-z[k]))
            f = 1.0 / (1.0 + math.exp(-z[hidden + k]))
            o = 1.0 / (1.0 + math.exp(-z[2 * hidden + k]))
            g = math.tanh(z[3 * hidden + k])
            c[k] = f * c[k] + i * g
            new_h.append(o * math.tanh(c[k]))
        h = new_h
        outputs.append(list(h))
    return np.array(outputs)


def _lstm_params(rng, width, hidden):
    return {
        "W": rng.uniform(-0.5, 0.5, size=(width, 4 * hidden)),
        "U": rng.uniform(-0.5, 0.5, size=(hidden, 4 * hidden)),
        "b": rng.uniform(-0.5, 0.5, size=4 * hidden),
    }


def _grad_utterance(seed, config, num_frames=5):
    rng = np.random.default_rng(seed)
    length = int(rng.integers(1, 3))
    labels = rng.integers(0, config.num_classes - 1, size=length)
    return make_utterance(rng, num_frames, config.num_bins, config.visual_dim, labels, utt_id=f"g{seed}")


# -------------------------------------------------------------------------
# LSTM / BLSTM
# -------------------------------------------------------------------------
def test_lstm_forward_matches_scalar_loop(rng):
    params = _lstm_params(rng, 3, 2)
    x = rng.standard_normal((5, 3))
    h, _ = lstm_forward(params, x, "fwd")
    np.testing.assert_allclose(h, scalar_lstm(params["W"], params["U"], params["b"], x), atol=1e-12)

    h_bwd, _ = lstm_forward(params, x, "bwd")
    expected = scalar_lstm(params["W"], params["U"], params["b"], x[::-1])[::-1]
    np.testing.assert_allclose(h_bwd, expected, atol=1e-12)


def test_lstm_single_step_directions_agree(rng):
    params = _lstm_params(rng, 4, 3)
    x = rng.standard_normal((1, 4))
    np.testing.assert_allclose(lstm_forward(params, x, "fwd")[0], lstm_forward(params, x, "bwd")[0])


def test_lstm_rejects_non_finite_input(rng):
    params = _lstm_params(rng, 2, 2)
    x = rng.standard_normal((4, 2))
    x[2, 1] = np.nan
    with pytest.raises(NumericError, match="t=2"):
        lstm_forward(params, x, "fwd")


def test_blstm_concatenates_directions(rng):
    pair = {"fwd": _lstm_params(rng, 3, 2), "bwd": _lstm_params(rng, 3, 2)}
    x = rng.standard_normal((6, 3))
    h, _ = blstm_forward(pair, x)
    assert h.shape == (6, 4)
    np.testing.assert_array_equal(h[:, :2], lstm_forward(pair["fwd"], x, "fwd")[0])
    np.testing.assert_array_equal(h[:, 2:], lstm_forward(pair["bwd"], x, "bwd")[0])


# -------------------------------------------------------------------------
# PARAMETERS AND HEADS
# -------------------------------------------------------------------------
def test_init_parameters_layout(tiny_config):
    store = init_parameters(tiny_config, seed=0)
    assert store.shapes() == {f"{p}/{n}": s for p, names in expected_shapes(tiny_config).items()
                              for n, s in names.items()}
    hidden = tiny_config.hidden
    bias = store["enh/blstm0.fwd.b"]
    np.testing.assert_array_equal(bias[hidden:2 * hidden], FORGET_BIAS)
    assert np.all(bias[:hidden] == 0.0) and np.all(bias[2 * hidden:] == 0.0)
    W = store["asr/blstm0.fwd.W"]
    assert np.all(np.abs(W) <= 1.0 / np.sqrt(W.shape[0]))
    assert init_parameters(tiny_config, seed=0).checksum() == store.checksum()
    assert init_parameters(tiny_config, seed=1).checksum() != store.checksum()


def test_asr_only_model_has_no_enhancement_partition():
    config = ModelConfig(architecture="asr", asr_input_mode="visual", hidden=2, num_bins=6, visual_dim=3,
                         mel_channels=4, num_classes=4)
    store = init_parameters(config, seed=0)
    assert store.enh == {}
    assert store["asr/blstm0.fwd.W"].shape == (3, 8)


def test_presets():
    assert apply_preset(ModelConfig(), "paper").hidden == 250
    assert apply_preset(ModelConfig(hidden=7), "desk").hidden == 32


def test_enhancement_output_bounds(tiny_config, rng):
    store = init_parameters(tiny_config, seed=2)
    d = rng.uniform(0.5, 2.0, size=tiny_config.num_bins)
    x = 50.0 * rng.standard_normal((7, tiny_config.num_bins + tiny_config.visual_dim))
    y, _ = enh_forward(tiny_config, store.enh, x, d)
    assert y.shape == (7, tiny_config.num_bins)
    assert np.all(y > 0.0)
    assert np.all(y < tiny_config.k * d)


def test_pit_model_routes_target_stream(rng):
    config = ModelConfig(hidden=3, num_bins=6, visual_dim=3, mel_channels=4, num_classes=4,
                         enh_visual=False, enh_streams=2)
    store = init_parameters(config, seed=4)
    utt = make_utterance(rng, 5, 6, 3, [0, 1])
    out = model_forward(config, store, utt, mel_filterbank(4, 6), compute_std_vector([utt]))
    assert out.y_hat.shape == (2, 5, 6)
    _, perm = pit_mse(out.y_hat, [utt.clean, utt.interferer_clean])
    assert out.stream_index == perm.index(0)
    np.testing.assert_array_equal(out.enhanced, out.y_hat[out.stream_index])


# -------------------------------------------------------------------------
# FORWARD PROPERTIES
# -------------------------------------------------------------------------
@pytest.mark.parametrize("t", [0, 3, 6])
def test_lstm_directions_are_causal(rng, t):
    params = _lstm_params(rng, 3, 2)
    x = rng.standard_normal((7, 3))
    h_fwd, _ = lstm_forward(params, x, "fwd")
    h_bwd, _ = lstm_forward(params, x, "bwd")

    future_zeroed = x.copy()
    future_zeroed[t + 1:] = 0.0
    np.testing.assert_allclose(lstm_forward(params, future_zeroed, "fwd")[0][:t + 1], h_fwd[:t + 1],
                               rtol=0, atol=1e-15)
    past_zeroed = x.copy()
    past_zeroed[:t] = 0.0
    np.testing.assert_allclose(lstm_forward(params, past_zeroed, "bwd")[0][t:], h_bwd[t:], rtol=0, atol=1e-15)


def test_zero_parameters_give_zero_outputs(tiny_config, rng):
    zero = {"W": np.zeros((3, 8)), "U": np.zeros((2, 8)), "b": np.zeros(8)}
    x = rng.standard_normal((5, 3))
    assert np.all(lstm_forward(zero, x, "fwd")[0] == 0.0)
    h, _ = blstm_forward({"fwd": zero, "bwd": zero}, x)
    assert h.shape == (5, 4) and np.all(h == 0.0)

    zeros = init_parameters(tiny_config, seed=0).zeros_like()
    logits, _ = asr_forward(tiny_config, zeros.asr, rng.standard_normal((5, tiny_config.mel_channels)))
    assert logits.shape == (5, tiny_config.num_classes) and np.all(logits == 0.0)

    d = rng.uniform(0.5, 2.0, size=tiny_config.num_bins)
    x_enh = rng.standard_normal((5, tiny_config.num_bins + tiny_config.visual_dim))
    y, _ = enh_forward(tiny_config, zeros.enh, x_enh, d)
    np.testing.assert_array_equal(y, np.broadcast_to(0.5 * tiny_config.k * d, y.shape))


def test_saturated_head_reaches_mask_ceiling(tiny_config, rng):
    params = init_parameters(tiny_config, seed=0).zeros_like().enh
    params["head.b"][:] = 50.0
    d = rng.uniform(0.5, 2.0, size=tiny_config.num_bins)
    x = rng.standard_normal((4, tiny_config.num_bins + tiny_config.visual_dim))
    y, _ = enh_forward(tiny_config, params, x, d)
    np.testing.assert_allclose(y, np.broadcast_to(tiny_config.k * d, y.shape), rtol=1e-6)
    assert np.all(y < tiny_config.k * d)


def test_blstm_palindrome_with_tied_directions(rng):
    params = _lstm_params(rng, 3, 2)
    half = rng.standard_normal((3, 3))
    x = np.concatenate([half, half[::-1]])
    h, _ = blstm_forward({"fwd": params, "bwd": params}, x)
    np.testing.assert_allclose(h[:, :2], h[::-1, 2:], rtol=0, atol=1e-15)


def test_joint_forward_composes_branches(tiny_config, tiny_filterbank, rng):
    store = init_parameters(tiny_config, seed=3)
    utt = make_utterance(rng, 6, tiny_config.num_bins, tiny_config.visual_dim, [0, 1])
    d = compute_std_vector([utt])
    out = joint_forward(tiny_config, store, utt, tiny_filterbank, d)

    y, _ = enh_forward(tiny_config, store.enh, np.concatenate([utt.mixture, utt.visual], axis=1), d)
    logits, _ = asr_forward(tiny_config, store.asr, mel_warp(tiny_filterbank, y))
    np.testing.assert_array_equal(out.y_hat, y)
    np.testing.assert_array_equal(out.logits, logits)


def test_identity_filterbank_feeds_enhanced_spectrum(rng):
    config = ModelConfig(hidden=3, num_bins=6, visual_dim=3, mel_channels=6, num_classes=4, mel_identity=True)
    store = init_parameters(config, seed=5)
    utt = make_utterance(rng, 5, 6, 3, [2])
    out = joint_forward(config, store, utt, mel_filterbank(6, 6, identity=True), compute_std_vector([utt]))
    logits, _ = asr_forward(config, store.asr, out.y_hat)
    np.testing.assert_allclose(out.logits, logits, rtol=0, atol=1e-15)


def test_backward_rejects_foreign_cache(tiny_config, tiny_filterbank):
    store = init_parameters(tiny_config, seed=0)
    utt = _grad_utterance(0, tiny_config)
    out = model_forward(tiny_config, store, utt, tiny_filterbank, compute_std_vector([utt]))
    other = init_parameters(tiny_config.model_copy(update={"hidden": 2}), seed=0)
    with pytest.raises(ConsistencyError):
        backward(other, out.cache, d_logits=np.ones_like(out.logits))


def test_backward_without_upstream_is_zero(tiny_config, tiny_filterbank):
    store = init_parameters(tiny_config, seed=0)
    utt = _grad_utterance(1, tiny_config)
    out = model_forward(tiny_config, store, utt, tiny_filterbank, compute_std_vector([utt]))
    grads = backward(store, out.cache)
    assert all(np.all(g == 0.0) for _, g in grads.items())


def test_enhancement_gradient_leaves_asr_untouched(tiny_config, tiny_filterbank):
    store = init_parameters(tiny_config, seed=0)
    utt = _grad_utterance(2, tiny_config)
    out = model_forward(tiny_config, store, utt, tiny_filterbank, compute_std_vector([utt]))
    grads = backward(store, out.cache, d_y_hat=np.ones_like(out.y_hat))
    assert all(np.all(g == 0.0) for g in grads.asr.values())
    assert any(np.any(g != 0.0) for g in grads.enh.values())


# -------------------------------------------------------------------------
# GRADIENT CHECK
# -------------------------------------------------------------------------
@pytest.mark.parametrize("seed", range(20))
def test_joint_gradients_match_finite_differences(seed):
    """Both L_enh and L_asr gradients agree with central differences for every array"""
    config = ModelConfig(hidden=3, enh_layers=1, asr_layers=1, num_bins=6, visual_dim=3, mel_channels=4,
                         num_classes=4)
    utt = _grad_utterance(seed, config, num_frames=4 + seed % 3)
    store = init_parameters(config, seed=seed)
    model_fn, value_fn = loss_objectives(config, utt, mel_filterbank(4, 6), compute_std_vector([utt]))
    report = grad_check(model_fn, store, tolerance=1e-4, value_fn=value_fn)
    assert report.passed, report.failing
    assert {name.split(":")[0] for name in report.errors} == {"enh", "asr"}


def test_stacked_joint_gradients(tiny_config, tiny_filterbank):
    utt = _grad_utterance(21, tiny_config)
    store = init_parameters(tiny_config, seed=21)
    model_fn, value_fn = loss_objectives(tiny_config, utt, tiny_filterbank, compute_std_vector([utt]))
    report = grad_check(model_fn, store, value_fn=value_fn)
    assert report.passed, report.failing


@pytest.mark.parametrize("variant", [
    {"enh_visual": False, "enh_streams": 2},
    {"architecture": "asr", "asr_input_mode": "audio_visual"},
    {"architecture": "asr", "asr_input_mode": "visual"},
])
def test_variant_gradients(variant):
    config = ModelConfig(hidden=2, enh_layers=1, asr_layers=1, num_bins=6, visual_dim=3, mel_channels=4,
                         num_classes=4, **variant)
    utt = _grad_utterance(30, config)
    store = init_parameters(config, seed=30)
    model_fn, value_fn = loss_objectives(config, utt, mel_filterbank(4, 6), compute_std_vector([utt]))
    assert grad_check(model_fn, store, value_fn=value_fn).passed


def test_grad_check_flags_corrupted_gradient(tiny_config, tiny_filterbank):
    config = tiny_config.model_copy(update={"enh_layers": 1, "asr_layers": 1})
    utt = _grad_utterance(5, config)
    store = init_parameters(config, seed=5)
    model_fn, value_fn = loss_objectives(config, utt, tiny_filterbank, compute_std_vector([utt]))

    def corrupted(s):
        result = model_fn(s)
        _, grads = result["asr"]
        grads["asr/out.b"][0] += 0.5
        return result

    report = grad_check(corrupted, store, value_fn=value_fn)
    assert not report.passed
    assert report.failing == ["asr:asr/out.b"]


def test_grad_check_linear_model_is_near_exact(rng):
    store = ParameterStore(enh={"w": rng.standard_normal((3, 2))}, asr={"v": rng.standard_normal(4)})
    coef = store.zeros_like()
    for key, array in coef.items():
        array[...] = rng.choice([-1.0, 1.0], size=array.shape) * rng.uniform(0.5, 2.0, size=array.shape)

    def value(s):
        return sum(float(np.sum(coef[k] * a)) for k, a in s.items())

    report = grad_check(lambda s: (value(s), coef), store)
    assert report.max_error < 1e-8


# -------------------------------------------------------------------------
# CHECKPOINTS
# -------------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path, tiny_config, rng):
    store = init_parameters(tiny_config, seed=9)
    d = rng.uniform(0.1, 1.0, size=tiny_config.num_bins)
    save_checkpoint(store, tiny_config, str(tmp_path / "ckpt"), std_vector=d)
    loaded, config = load_checkpoint(str(tmp_path / "ckpt"))
    assert config == tiny_config
    assert loaded.checksum() == store.checksum()
    for key, array in store.items():
        assert loaded[key].tobytes() == array.tobytes()
    np.testing.assert_array_equal(load_std_vector(str(tmp_path / "ckpt")), d)


def test_checkpoint_shape_mismatch(tmp_path, tiny_config):
    save_checkpoint(init_parameters(tiny_config, seed=0), tiny_config, str(tmp_path))
    with pytest.raises(CorpusFormatError, match="shape"):
        load_checkpoint(str(tmp_path), tiny_config.model_copy(update={"hidden": 4}))


def test_checkpoint_invalid_config_echo(tmp_path, tiny_config):
    save_checkpoint(init_parameters(tiny_config, seed=0), tiny_config, str(tmp_path))
    manifest_path = tmp_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["config"]["hidden"] = -1
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(CorpusFormatError):
        load_checkpoint(str(tmp_path))
    with pytest.raises(CorpusFormatError):
        load_checkpoint(str(tmp_path / "missing"))


def _saved(tmp_path, config):
    save_checkpoint(init_parameters(config, seed=0), config, str(tmp_path))
    return tmp_path / "params.bin", tmp_path / "manifest.json"


def test_checkpoint_partial_float_payload(tmp_path, tiny_config):
    params, _ = _saved(tmp_path, tiny_config)
    params.write_bytes(params.read_bytes()[:-3])
    with pytest.raises(CorpusFormatError, match="bytes") as excinfo:
        load_checkpoint(str(tmp_path))
    assert excinfo.value.exit_code == 3


def test_checkpoint_truncated_payload(tmp_path, tiny_config):
    params, _ = _saved(tmp_path, tiny_config)
    params.write_bytes(params.read_bytes()[:-8])
    with pytest.raises(CorpusFormatError, match="truncated"):
        load_checkpoint(str(tmp_path))


def test_checkpoint_trailing_payload(tmp_path, tiny_config):
    params, _ = _saved(tmp_path, tiny_config)
    params.write_bytes(params.read_bytes() + b"\x00" * 8)
    with pytest.raises(CorpusFormatError, match="accounts for"):
        load_checkpoint(str(tmp_path))


def test_checkpoint_malformed_manifest(tmp_path, tiny_config):
    _, manifest_path = _saved(tmp_path, tiny_config)
    manifest = json.loads(manifest_path.read_text())

    without_arrays = {k: v for k, v in manifest.items() if k != "arrays"}
    manifest_path.write_text(json.dumps(without_arrays))
    with pytest.raises(CorpusFormatError):
        load_checkpoint(str(tmp_path))

    entry = manifest["arrays"][0]
    del entry["offset"]
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(CorpusFormatError, match=re.escape(f"{entry['partition']}/{entry['name']}")):
        load_checkpoint(str(tmp_path))
