import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coalnet import nn
from coalnet.augment import NormalizationStats
from coalnet.core import Rng, make_manifest, read_pgm
from coalnet.errors import FormatError, NoSuchLayer, NotConv, ParamError, ShapeMismatch, SpecMismatch, VersionError
from coalnet.synth import SynthSpec, synth_arrays
from coalnet.train import (
    Checkpoint,
    LossLog,
    SgdConfig,
    decode_checkpoint,
    encode_checkpoint,
    export_kernel_grid,
    fine_tune,
    fit,
    kernel_grid,
    load_checkpoint,
    resolve_freeze,
    save_checkpoint,
    sgd_step,
    train_loop,
    transfer_params,
)


def small_spec(num_classes=3, size=16):
    layers = [
        {"kind": "conv", "out_channels": 4, "kernel": 3, "pad": 1},
        {"kind": "relu"},
        {"kind": "lrn", "size": 3},
        {"kind": "pool", "window": 2, "stride": 2},
        {"kind": "conv", "out_channels": 4, "kernel": 3, "pad": 1},
        {"kind": "relu"},
        {"kind": "pool", "window": 2, "stride": 2},
        {"kind": "dense", "out": 8},
        {"kind": "relu"},
        {"kind": "dropout", "p": 0.5},
        {"kind": "dense", "out": num_classes},
    ]
    return nn.NetworkSpec(layers, (1, size, size), num_classes)


@pytest.fixture(scope="module")
def data16():
    x, y, _ = synth_arrays(SynthSpec(n_per_class=6), size=16)
    return x, y


# --- sgd step ---------------------------------------------------------------

def test_sgd_printed_recurrence_hand_case():
    # independent exact recurrence: step(n) = -eta * (g + alpha * step(n-1))
    eta, alpha, g = Fraction(1, 10), Fraction(9, 10), Fraction(1)
    w, prev, expect = Fraction(0), Fraction(0), []
    for _ in range(2):
        prev = -eta * (g + alpha * prev)
        w += prev
        expect.append(w)
    assert expect == [Fraction(-1, 10), Fraction(-191, 1000)]

    cfg = SgdConfig(eta=0.1, momentum=0.9)
    p, v = {"w": np.zeros(1)}, {}
    got = []
    for _ in range(2):
        p, v = sgd_step(p, {"w": np.ones(1)}, v, cfg)
        got.append(p["w"][0])
    assert abs(got[0] - float(expect[0])) < 1e-12
    assert abs(got[1] - float(expect[1])) < 1e-12


def test_sgd_classic_momentum():
    cfg = SgdConfig(eta=0.1, momentum=0.9, classic_momentum=True)
    p, v = {"w": np.zeros(1)}, {}
    p, v = sgd_step(p, {"w": np.ones(1)}, v, cfg)
    p, v = sgd_step(p, {"w": np.ones(1)}, v, cfg)
    # v2 = 0.9 * -0.1 - 0.1 = -0.19, w = -0.29
    assert p["w"][0] == pytest.approx(-0.29, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1.0))
def test_sgd_momentum_zero_is_vanilla(seed, eta):
    r = Rng(seed)
    cfg = SgdConfig(eta=eta, momentum=0.0)
    p, v = {"a": r.normal(6).reshape(2, 3)}, {}
    ref = p["a"].copy()
    for _ in range(100):
        g = r.normal(6).reshape(2, 3)
        p, v = sgd_step(p, {"a": g}, v, cfg)
        ref = ref - eta * g
    assert np.array_equal(p["a"], ref)


def test_sgd_weight_decay_and_lr_mult():
    cfg = SgdConfig(eta=0.5, momentum=0.0, weight_decay=0.1)
    p, _ = sgd_step({"w": np.full(2, 2.0)}, {"w": np.zeros(2)}, {}, cfg)
    assert np.allclose(p["w"], 2.0 - 0.5 * 0.2)
    p, _ = sgd_step({"w": np.zeros(2)}, {"w": np.ones(2)}, {}, SgdConfig(eta=1.0, momentum=0.0), {"w": 0.1})
    assert np.allclose(p["w"], -0.1)


def test_sgd_does_not_mutate_and_skips_missing():
    w = np.zeros(3)
    p, v = sgd_step({"w": w, "frozen": np.ones(2)}, {"w": np.ones(3)}, {}, SgdConfig())
    assert np.all(w == 0)
    assert "frozen" not in v and np.all(p["frozen"] == 1)
    with pytest.raises(ShapeMismatch):
        sgd_step({"w": w}, {"w": np.ones(2)}, {}, SgdConfig())


@pytest.mark.parametrize("bad", [dict(eta=0), dict(momentum=1.0), dict(momentum=-0.1), dict(weight_decay=-1),
                                 dict(batch_size=0), dict(iterations=-1)])
def test_sgd_config_validation(bad):
    with pytest.raises(ParamError):
        SgdConfig(**bad)


# --- loss log ---------------------------------------------------------------

def test_loss_log_csv_and_order(tmp_path):
    log = LossLog()
    log.append(1, 1.5, 0.25)
    log.append(2, 0.5, 1.0)
    with pytest.raises(ValueError):
        log.append(2, 0.1, 1.0)
    log.save(tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text() == "iter,loss,acc\n1,1.5,0.25\n2,0.5,1.0\n"


def test_loss_log_iterations_to_reach():
    log = LossLog()
    for i, l in enumerate([2.0, 1.0, 0.4, 0.4, 0.1], start=1):
        log.append(i, l, 0.0)
    assert log.iterations_to_reach(0.5, window=1) == 3
    assert log.iterations_to_reach(0.5, window=3) == 5  # (0.4 + 0.4 + 0.1) / 3
    assert log.iterations_to_reach(0.01) is None


# --- freezing and training --------------------------------------------------

def test_resolve_freeze():
    spec = small_spec()
    assert resolve_freeze(spec, [0, "conv2", 10]) == {"conv1", "conv2", "dense2"}
    for bad in [[2], ["relu1"], [99], ["nope"]]:
        with pytest.raises(ParamError):
            resolve_freeze(spec, bad)


def test_freeze_everything_keeps_params_bit_identical(data16):
    spec = small_spec()
    p0 = nn.init_params(spec, Rng(1))
    every = [i.index for i in spec.param_layers()]
    p1, log = fit(spec, p0, *data16, SgdConfig(iterations=100, batch_size=8), freeze=every)
    assert len(log.rows) == 100
    assert all(np.array_equal(p0[k], p1[k]) for k in p0)


@settings(max_examples=8, deadline=None)
@given(st.sets(st.sampled_from(["conv1", "conv2", "dense1", "dense2"])), st.integers(0, 20))
def test_frozen_subset_bit_identical(data16, frozen, iters):
    spec = small_spec()
    p0 = nn.init_params(spec, Rng(2))
    p1, _ = fit(spec, p0, *data16, SgdConfig(iterations=iters, batch_size=8), freeze=sorted(frozen))
    for k in p0:
        if k.split(".")[0] in frozen or iters == 0:
            assert np.array_equal(p0[k], p1[k])


def test_fit_deterministic(data16):
    spec = small_spec()
    p0 = nn.init_params(spec, Rng(3))
    cfg = SgdConfig(iterations=15, batch_size=10, seed=5)
    a, la = fit(spec, p0, *data16, cfg)
    b, lb = fit(spec, p0, *data16, cfg)
    assert la.to_csv() == lb.to_csv()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_fit_uses_short_final_batch(data16):
    spec = small_spec()
    x, y = data16
    # 18 samples, batch 8: the third batch holds 2 samples
    _, log = fit(spec, nn.init_params(spec, Rng(0)), x, y, SgdConfig(iterations=3, batch_size=8))
    assert log.rows[2][2] in (0.0, 0.5, 1.0)


def test_full_batch_loss_strictly_decreases():
    # deterministic objective: dropout disabled so the loss is a fixed function of the weights
    x, y, _ = synth_arrays(SynthSpec())
    spec = nn.mini_alexnet()
    params, velocity = nn.init_params(spec, Rng(0)), {}
    cfg = SgdConfig(eta=1e-3)
    losses = []
    for _ in range(11):
        logits, cache = nn.network_forward(spec, params, x, "eval", return_cache=True)
        loss, g = nn.softmax_cross_entropy(logits, y)
        losses.append(loss)
        grads = nn.network_backward(spec, params, cache, g, need_input_grad=False)
        del grads["input"]
        params, velocity = sgd_step(params, grads, velocity, cfg)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_loop_reads_manifest(tmp_path):
    from coalnet.synth import generate

    m = generate(SynthSpec(n_per_class=3, image_size=32), tmp_path)
    spec = small_spec()
    params, log = train_loop(spec, nn.init_params(spec, Rng(0)), m, NormalizationStats(0.4, 0.2),
                             SgdConfig(iterations=4, batch_size=4))
    assert [r[0] for r in log.rows] == [1, 2, 3, 4]
    with pytest.raises(ParamError):
        train_loop(spec, params, make_manifest([]), NormalizationStats(0.4, 0.2), SgdConfig(iterations=1))


# --- checkpoints ------------------------------------------------------------

def f32_params(spec, seed):
    return {k: v.astype(np.float32).astype(np.float64) for k, v in nn.init_params(spec, Rng(seed)).items()}


def test_checkpoint_round_trip(tmp_path):
    spec = small_spec()
    spec.extra["normalization"] = {"mean": 0.25, "std": 0.5}
    params = f32_params(spec, 4)
    save_checkpoint(params, spec, tmp_path / "ck.bin")
    ck = load_checkpoint(tmp_path / "ck.bin")
    assert ck.spec.to_dict() == spec.to_dict()
    assert list(ck.params) == list(params)
    assert all(np.array_equal(ck.params[k], params[k]) for k in params)
    assert ck.stats == NormalizationStats(0.25, 0.5)
    assert encode_checkpoint(ck.params, ck.spec) == (tmp_path / "ck.bin").read_bytes()


def test_checkpoint_byte_layout():
    spec = small_spec()
    params = {"a.b": np.array([[1.0, -2.0]])}
    data = encode_checkpoint(params, spec)
    blob = spec.to_json().encode()
    assert data[:4] == b"CGCK"
    assert struct.unpack("<II", data[4:12]) == (1, len(blob))
    tail = data[12 + len(blob):]
    assert tail == struct.pack("<IH", 1, 3) + b"a.b" + struct.pack("<BII", 2, 1, 2) + struct.pack("<2f", 1.0, -2.0)


def test_checkpoint_zero_iterations_is_identity(tmp_path, data16):
    spec = small_spec()
    save_checkpoint(f32_params(spec, 5), spec, tmp_path / "ck.bin")
    ck = load_checkpoint(tmp_path / "ck.bin")
    p, log = fit(spec, ck.params, *data16, SgdConfig(iterations=0))
    save_checkpoint(p, spec, tmp_path / "ck2.bin")
    assert (tmp_path / "ck.bin").read_bytes() == (tmp_path / "ck2.bin").read_bytes()
    assert log.rows == []


def test_checkpoint_corruptions():
    spec = small_spec()
    data = encode_checkpoint(f32_params(spec, 6), spec)
    for cut in (0, 3, 10, 40, len(data) - 1):
        with pytest.raises(FormatError):
            decode_checkpoint(data[:cut])
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(data + b"\x00")
    with pytest.raises(VersionError):
        decode_checkpoint(data[:4] + struct.pack("<I", 2) + data[8:])
    bad_json = b"CGCK" + struct.pack("<II", 1, 3) + b"{x}" + struct.pack("<I", 0)
    with pytest.raises(FormatError):
        decode_checkpoint(bad_json)


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_checkpoint_random_bytes_never_crash(data):
    with pytest.raises(FormatError):
        decode_checkpoint(b"CGCK" + data)


# --- transfer ---------------------------------------------------------------

def test_transfer_copies_all_but_head():
    src = small_spec(num_classes=5)
    ck = Checkpoint(src, f32_params(src, 7))
    dst = small_spec(num_classes=3)
    params, copied = transfer_params(ck, dst, Rng(0))
    assert copied == ["conv1", "conv2", "dense1"]
    for k in ("conv1.weight", "conv2.bias", "dense1.weight"):
        assert np.array_equal(params[k], ck.params[k])
    assert params["dense2.weight"].shape == (3, 8)
    assert np.all(params["dense2.bias"] == 0)


def test_transfer_rejects_body_change():
    src = small_spec()
    layers = [dict(l) for l in src.layers]
    layers[0]["out_channels"] = 5
    with pytest.raises(SpecMismatch):
        transfer_params(Checkpoint(src, f32_params(src, 0)), nn.NetworkSpec(layers, (1, 16, 16), 3), Rng(0))
    with pytest.raises(SpecMismatch):
        transfer_params(Checkpoint(src, f32_params(src, 0)), small_spec(size=24), Rng(0))


def test_fine_tune_all_but_final_frozen(data16):
    spec = small_spec()
    ck = Checkpoint(spec, f32_params(spec, 8))
    params, log = fine_tune(ck, spec, ["conv1", "conv2", "dense1"], SgdConfig(iterations=10, batch_size=8),
                            arrays=data16)
    assert len(log.rows) == 10
    for k, v in ck.params.items():
        if k.startswith("dense2"):
            assert not np.array_equal(v, params[k])
        else:
            assert np.array_equal(v, params[k])


def test_fine_tune_lr_multiplier(data16):
    # one step with momentum 0: copied layers move exactly mult times as far
    spec = small_spec()
    ck = Checkpoint(spec, f32_params(spec, 9))
    cfg = SgdConfig(iterations=1, batch_size=18, momentum=0.0)
    full, _ = fine_tune(ck, spec, (), cfg, arrays=data16, pretrained_lr_mult=1.0)
    tenth, _ = fine_tune(ck, spec, (), cfg, arrays=data16, pretrained_lr_mult=0.1)
    d_full = full["conv1.weight"] - ck.params["conv1.weight"]
    d_tenth = tenth["conv1.weight"] - ck.params["conv1.weight"]
    assert np.allclose(d_tenth, 0.1 * d_full, rtol=1e-9, atol=1e-15)


# --- kernel grid ------------------------------------------------------------

def test_kernel_grid_tiling():
    w = Rng(0).normal(8 * 25).reshape(8, 1, 5, 5)
    img = kernel_grid(w)
    assert (img.width, img.height) == (19, 19)
    px = img.pixels
    assert np.all(px[0] == 0) and np.all(px[:, 0] == 0) and np.all(px[6] == 0)
    assert np.all(px[13:18, 13:18] == 0)  # ninth cell unused
    first = px[1:6, 1:6]
    assert first.min() == 0 and first.max() == 255


def test_kernel_grid_constant_filter_and_multi_channel():
    img = kernel_grid(np.full((1, 1, 3, 3), 0.7))
    assert np.all(img.pixels[1:4, 1:4] == 128)
    img = kernel_grid(Rng(1).normal(2 * 3 * 9).reshape(2, 3, 3, 3))
    # six cells in a 3x2 grid
    assert (img.width, img.height) == (3 * 4 + 1, 2 * 4 + 1)


def test_export_kernel_grid(tmp_path):
    spec = small_spec()
    ck = Checkpoint(spec, f32_params(spec, 10))
    img = export_kernel_grid(ck, "conv1", tmp_path / "g.pgm")
    assert read_pgm(tmp_path / "g.pgm") == img
    with pytest.raises(NoSuchLayer):
        export_kernel_grid(ck, "conv9", tmp_path / "x.pgm")
    with pytest.raises(NotConv):
        export_kernel_grid(ck, "dense1", tmp_path / "x.pgm")
