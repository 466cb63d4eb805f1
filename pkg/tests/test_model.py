import numpy as np
import pytest

from oracles import closed_form_param_count
from siamese_gap import checkpoint, ops
from siamese_gap.errors import ConfigurationError, FormatError
from siamese_gap.model import (
    ABLATION_TAPS,
    CANONICAL_BLOCKS,
    ModelConfig,
    block_output_sizes,
    build,
    count_params,
    layer_plan,
    parse_taps,
)
from siamese_gap.tensor import Tape, Tensor
from siamese_gap.training import AdamState, adam_step

BLOCKS = [(2, 32, 1), (3, 64, 2), (4, 128, 2), (4, 256, 2)]


@pytest.fixture(scope="module")
def full():
    return build(seed=0)


def pair(seed, n=2, size=128):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((n, 1, size, size))), Tensor(rng.random((n, 1, size, size)))


def test_canonical_layout():
    assert [(b.layer_count, b.channels, b.first_layer_stride) for b in CANONICAL_BLOCKS] == BLOCKS
    plan = layer_plan(ModelConfig())
    assert len(plan) == 13
    assert [p.stride for p in plan] == [1, 1, 2, 1, 1, 2, 1, 1, 1, 2, 1, 1, 1]
    assert block_output_sizes(ModelConfig()) == [128, 64, 32, 16]


def test_layer_counts(full):
    names = list(full.params)
    assert sum(n.endswith("conv.weight") for n in names) == 13
    assert sum(n.endswith("bn.gamma") for n in names) == 13
    assert sum(n.startswith("head.") for n in names) == 2
    assert len(full.running) == 13


@pytest.mark.parametrize("taps", ABLATION_TAPS)
def test_fused_width_and_head_size(taps):
    cfg = ModelConfig(taps=taps)
    assert cfg.fused_width == sum(BLOCKS[t - 1][1] for t in taps)
    assert build(cfg).params["head.weight"].shape == (cfg.fused_width, 2)


def test_tap_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(taps=(1, 2))
    with pytest.raises(ConfigurationError):
        ModelConfig(taps=(0, 4))
    with pytest.raises(ConfigurationError):
        ModelConfig(pooling="avg")
    assert parse_taps("p2,P4") == (2, 4)
    assert parse_taps("4,1") == (1, 4)
    assert ModelConfig(taps=(2, 4)).fused_width == 320


def test_param_counts(full):
    assert count_params(full) == closed_form_param_count(BLOCKS) == 2_686_690
    head = full.params["head.weight"].data.size + full.params["head.bias"].data.size
    assert head == 962
    bn = sum(p.data.size for n, p in full.params.items() if ".bn." in n)
    assert bn == 3584
    assert abs(count_params(full) / 2.71e6 - 1) < 0.03


@pytest.mark.parametrize("taps", ABLATION_TAPS)
def test_param_count_matches_oracle_for_every_tap_set(taps):
    assert count_params(build(ModelConfig(taps=taps))) == closed_form_param_count(BLOCKS, taps=taps)


def test_kaiming_statistics_and_determinism(full):
    again = build(seed=0)
    for n, p in full.params.items():
        np.testing.assert_array_equal(p.data, again.params[n].data)
    w = full.params["block2.layer2.conv.weight"].data
    assert w.size >= 10_000
    assert abs(w.mean()) < 0.01
    assert abs(w.var() / (2 / (64 * 9)) - 1) < 0.05
    big = full.params["block4.layer2.conv.weight"].data
    assert abs(big.var() / (2 / (256 * 9)) - 1) < 0.05
    assert np.all(full.params["block2.layer1.bn.gamma"].data == 1)
    assert not full.params["head.bias"].data.any()
    other = build(seed=1)
    assert not np.array_equal(other.params["head.weight"].data, full.params["head.weight"].data)


def test_forward_branch_zero_input(full):
    out = full.forward_branch(Tensor(np.zeros((2, 1, 128, 128))), training=False)
    assert out.vector.shape == (2, 480)
    assert not out.vector.data.any()
    assert [a.shape[1] for a in out.activations] == [128, 64, 32, 16]


def test_forward_branch_wrong_shape(full):
    with pytest.raises(ConfigurationError):
        full.forward_branch(Tensor(np.zeros((1, 1, 64, 64))))
    with pytest.raises(ConfigurationError):
        full.forward_pair(Tensor(np.zeros((1, 1, 128, 128))), Tensor(np.zeros((2, 1, 128, 128))))


def test_forward_deterministic_and_swap_symmetric(full):
    a, b = pair(0)
    first = full.forward_pair(a, b).logits.data
    np.testing.assert_array_equal(first, full.forward_pair(a, b).logits.data)
    np.testing.assert_array_equal(first, full.forward_pair(b, a).logits.data)
    probs = full.forward_pair(a, b).probabilities.data
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)


def test_zero_medial_branch_oracle(full):
    a, _ = pair(1)
    zero = Tensor(np.zeros_like(a.data))
    logits = full.forward_pair(a, zero).logits.data
    vec = full.forward_branch(a).vector.data
    expect = vec @ full.params["head.weight"].data + full.params["head.bias"].data
    np.testing.assert_array_equal(logits, expect)


def test_weight_sharing_after_a_step():
    model = build(ModelConfig(input_size=32), seed=3)
    a, b = pair(2, n=4, size=32)
    state = AdamState.zeros_like(model.params)
    with Tape() as tape:
        out = model.forward_pair(a, b, training=True, rng=np.random.default_rng(0))
        loss = ops.cross_entropy(out.logits, np.array([0, 1, 1, 0]))
    tape.backward(loss)
    adam_step(model.params, state, 1e-3)
    lat = model.forward_branch(a).vector.data
    med = model.forward_branch(Tensor(a.data.copy())).vector.data
    np.testing.assert_array_equal(lat, med)
    assert all("lateral" not in n and "medial" not in n for n in model.params)


def test_gradient_reaches_block1_through_both_paths():
    cfg = ModelConfig(input_size=32)
    a, b = pair(4, n=2, size=32)
    grads = {}
    for taps in ((1, 2, 3, 4), (4,)):
        model = build(ModelConfig(input_size=32, taps=taps), seed=0)
        with Tape() as tape:
            loss = ops.cross_entropy(model.forward_pair(a, b, training=True, rng=np.random.default_rng(0)).logits, [0, 1])
        tape.backward(loss)
        grads[taps] = model.params["block1.layer1.conv.weight"].grad
        assert np.abs(grads[taps]).max() > 0
    # the P1 tap adds a direct path, so the block-1 gradient changes
    assert not np.allclose(grads[(1, 2, 3, 4)], grads[(4,)])
    del cfg


def test_gmp_model_runs():
    model = build(ModelConfig(pooling="gmp", taps=(2, 4), input_size=32), seed=0)
    a, b = pair(5, size=32)
    assert model.forward_pair(a, b).logits.shape == (2, 2)


# -- checkpoint ---------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path, full):
    a, b = pair(6)
    before = full.forward_pair(a, b).logits.data
    path = checkpoint.save(full, tmp_path / "m.ckpt", seed=5, epoch=7)
    cp = checkpoint.load(path)
    assert (cp.seed, cp.epoch, cp.config) == (5, 7, full.config)
    np.testing.assert_array_equal(cp.build().forward_pair(a, b).logits.data, before)
    raw = path.read_bytes()
    assert raw[:4] == b"SGAP" and int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_with_optimizer_state(tmp_path):
    model = build(ModelConfig(input_size=16, taps=(4,)), seed=0)
    state = AdamState.zeros_like(model.params)
    for p in model.params.values():
        p.grad = np.ones_like(p.data)
    adam_step(model.params, state, 1e-3)
    path = checkpoint.save(checkpoint.capture(model, seed=1, epoch=2, adam=state), tmp_path / "o.ckpt")
    cp = checkpoint.load(path)
    assert cp.adam_t == 1
    for n in model.params:
        np.testing.assert_array_equal(cp.adam_m[n], state.m[n])
        np.testing.assert_array_equal(cp.adam_v[n], state.v[n])


def test_checkpoint_truncated_and_corrupt(tmp_path, full):
    path = checkpoint.save(full, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            checkpoint.load(tmp_path / "t.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        checkpoint.load(tmp_path / "v.ckpt")
    (tmp_path / "m2.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        checkpoint.load(tmp_path / "m2.ckpt")


def test_checkpoint_config_conflict(tmp_path, full):
    path = checkpoint.save(full, tmp_path / "m.ckpt")
    with pytest.raises(ConfigurationError):
        checkpoint.load(path, expected_config=ModelConfig(taps=(4,)))
    assert checkpoint.load(path, expected_config=ModelConfig()).config == full.config
