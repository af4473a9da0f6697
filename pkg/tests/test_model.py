import numpy as np
import pytest

from lsw import ops
from lsw.model import (
    CheckpointError,
    ConfigError,
    NetworkConfig,
    build_network,
    classify,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
    stack_pairs,
)
from lsw.pairs import ALL_TRANSFORMS, dihedral_augment
from lsw.tensor import Tape, Tensor
from lsw.train import TrainConfig, train
from conftest import activation_pattern, synthetic_pair, toy_network_gradient_error


def closed_form_param_count(widths, dense, bands=5, depth=2):
    # conv: F*C*kd*kh*kw + F, kernels 2x3x3 then 1x3x3; dense: K*M + M
    total, c = 0, bands
    for i, f in enumerate(widths):
        kd = depth if i == 0 else 1
        total += f * c * kd * 3 * 3 + f
        c = f
    for m in dense:
        total += c * m + m
        c = m
    return total


def test_desk_scale_param_count_matches_closed_form():
    net = build_network(NetworkConfig.desk_scale())
    expected = closed_form_param_count((16, 32, 64, 64, 128), (64, 16, 1))
    assert net.param_count == expected == 144689


def test_param_count_independent_of_tile_size():
    assert build_network(NetworkConfig.ledger(tile_size=32)).param_count == build_network(NetworkConfig.desk_scale()).param_count


def test_exactly_eight_learned_layers():
    net = build_network(NetworkConfig.desk_scale())
    assert len(net.params) // 2 == 8
    assert [p.name for p in net.params[-2:]] == ["dense8.weight", "dense8.bias"]


def test_seven_layer_config_rejected():
    cfg = NetworkConfig.desk_scale()
    bad = NetworkConfig(tile_size=64, conv=cfg.conv, dense=(16, 1))
    with pytest.raises(ConfigError, match="8 learned layers"):
        build_network(bad)


def test_tile_not_divisible_by_pool_factor():
    with pytest.raises(ConfigError, match="divisible"):
        NetworkConfig.ledger(tile_size=60)


def test_build_is_deterministic_and_init_scaled():
    a = build_network(NetworkConfig.desk_scale(init_seed=7))
    b = build_network(NetworkConfig.desk_scale(init_seed=7))
    for pa, pb in zip(a.params, b.params):
        assert pa.data.tobytes() == pb.data.tobytes()
    c = build_network(NetworkConfig.desk_scale(init_seed=8))
    assert not np.array_equal(a.params[0].data, c.params[0].data)
    for p in a.params:
        if p.name.endswith("bias"):
            assert not p.data.any()
    # fan_in of layer 1 is 5*2*3*3 = 90
    assert abs(a.params[0].data.std() - np.sqrt(2 / 90)) < 0.1 * np.sqrt(2 / 90)


def test_desk_scale_shape_ledger():
    cfg = NetworkConfig.desk_scale()
    assert cfg.layer_shapes() == [(16, 1, 32, 32), (32, 1, 16, 16), (64, 1, 8, 8), (64, 1, 4, 4), (128,), (64,), (16,), (1,)]


def test_forward_intermediate_shapes_follow_ledger(rng):
    net = build_network(NetworkConfig.desk_scale())
    x = rng.random((2, 5, 2, 64, 64)).astype(np.float32)
    with Tape() as tape:
        forward(net, x)
    pooled = [n.output.shape[1:] for n in tape.nodes if n.op == "maxpool3d"]
    assert pooled == [(16, 1, 32, 32), (32, 1, 16, 16), (64, 1, 8, 8), (64, 1, 4, 4)]
    first_conv = next(n for n in tape.nodes if n.op == "conv3d")
    assert first_conv.output.shape == (2, 16, 1, 64, 64)


def test_forward_outputs_in_open_unit_interval(rng):
    net = build_network(NetworkConfig.desk_scale(init_seed=3))
    for x in (rng.random((4, 5, 2, 64, 64)), np.zeros((1, 5, 2, 64, 64)), np.ones((1, 5, 2, 64, 64))):
        p = forward(net, x).data
        assert p.shape == (x.shape[0],)
        assert np.all(np.isfinite(p)) and np.all((p > 0) & (p < 1))


def test_forward_identical_examples_identical_outputs(rng):
    net = build_network(NetworkConfig.desk_scale())
    x = rng.random((1, 5, 2, 64, 64))
    p = forward(net, np.concatenate([x, x])).data
    assert p[0] == p[1]


def test_forward_shape_error_names_both_shapes():
    net = build_network(NetworkConfig.desk_scale())
    with pytest.raises(ops.ShapeError, match=r"expected batch shape \[N, 5, 2, 64, 64\], got \[1, 5, 2, 32, 32\]"):
        forward(net, np.zeros((1, 5, 2, 32, 32)))


def test_threshold_rule():
    assert classify(0.5, 0.5).label == 1
    assert classify(0.49, 0.5).label == 0
    assert classify(0.9).label == 1


def test_predict_on_transformed_pair_stays_in_range():
    net = build_network(NetworkConfig.desk_scale())
    pair = synthetic_pair(1, True)
    for t in ALL_TRANSFORMS:
        pred = predict(net, dihedral_augment(pair, t))
        assert 0 < pred.probability < 1
        assert pred.label == int(pred.probability >= 0.5)


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_network(NetworkConfig.desk_scale(init_seed=5))
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.config == net.config
    for a, b in zip(net.params, back.params):
        assert a.name == b.name and np.array_equal(a.data, b.data)
    x = rng.random((2, 5, 2, 64, 64))
    assert np.array_equal(forward(net, x).data, forward(back, x).data)
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path):
    net = build_network(NetworkConfig.desk_scale())
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")


def test_network_gradient_check_small_sample():
    # the full 100-seed sweep runs in the acceptance suite
    assert max(toy_network_gradient_error(s) for s in range(5)) < 1e-4


def test_activation_pattern_changes_with_input(rng):
    net = build_network(NetworkConfig.ledger(tile_size=8, input_bands=2, widths=(2, 2, 2, 2, 2), dense=(3, 2, 1), pools=3), np.float64)
    digests = set()
    for _ in range(3):
        with Tape() as t:
            forward(net, rng.standard_normal((1, 2, 2, 8, 8)))
        digests.add(activation_pattern(t))
    assert len(digests) > 1


def test_overfit_one_positive_one_negative():
    pos, neg = synthetic_pair(11, True), synthetic_pair(12, False, illumination=1.1)
    net = build_network(NetworkConfig.desk_scale(init_seed=0))
    net, records = train(net, [pos, neg], None, TrainConfig(epochs=120, batch_size=2, augment=False))
    assert len(records) == 120
    final = forward(net, stack_pairs([pos, neg])).data.astype(np.float64)
    loss = ops.bce_loss(Tensor(final, dtype=np.float64), [1, 0]).value
    assert records[-1].train_loss < 0.05
    assert loss < 0.05
