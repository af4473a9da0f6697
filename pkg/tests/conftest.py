import hashlib

import numpy as np
import pytest

from lsw import ops
from lsw.tensor import Tape, Tensor, backward
from oracles import block_argmax, central_difference, relative_error


def activation_pattern(tape, pool=(1, 2, 2)) -> bytes:
    """Digest of relu signs and max-pool argmaxes recorded on ``tape``."""
    h = hashlib.sha1()
    for node in tape.nodes:
        if node.op == "relu":
            h.update(np.packbits(node.inputs[0].data > 0).tobytes())
        elif node.op == "maxpool3d":
            h.update(block_argmax(node.inputs[0].data, pool).tobytes())
    return h.digest()


def op_gradient_error(build, arrays, seed=0, eps=1e-6):
    """Max relative error between tape gradients and central differences for
    ``sum(R * build(*tensors))`` with a fixed random weighting ``R``."""
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        out = build(*tensors)
    wr = np.random.default_rng(seed + 1)
    # magnitudes kept away from zero so no gradient entry drowns in rounding noise
    weights = wr.choice([-1.0, 1.0], size=out.shape) * wr.uniform(0.5, 1.5, size=out.shape)
    with tape:
        loss = ops.sum(out, weights)
    grads = backward(loss, tape, tensors)

    def f():
        return float((build(*tensors).data * weights).sum())

    numeric = central_difference(f, [t.data for t in tensors], eps)
    return max(relative_error(g, n).max() for g, n in zip(grads, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_network_gradient_error(seed: int) -> float:
    """Worst relative error over all parameters of the shrunken 8-layer net
    (2 bands, tile 8) at float64 against kink-aware central differences.

    Biases are drawn off zero so no relu sits exactly on its kink."""
    from lsw.model import NetworkConfig, build_network
    from oracles import pattern_central_difference

    cfg = NetworkConfig.ledger(tile_size=8, input_bands=2, widths=(2, 2, 2, 2, 2), dense=(3, 2, 1), pools=3, init_seed=seed)
    net = build_network(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for p in net.params:
        if p.name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.1, p.shape)
    x = rng.random((2, 2, 2, 8, 8))
    y = np.array([1.0, 0.0])
    with Tape() as tape:
        loss = ops.bce_loss(net.forward(x), y)
    backward(loss, tape)

    def f():
        with Tape() as t:
            v = ops.bce_loss(net.forward(x), y).value
        return v, activation_pattern(t)

    numeric = pattern_central_difference(f, [p.data for p in net.params])
    return max(relative_error(p.grad, n).max() for p, n in zip(net.params, numeric))


def synthetic_pair(seed: int, positive: bool, size: int = 64, illumination: float = 1.0):
    """A TilePair cut as the whole scene from one generated before/after pair."""
    from lsw import DEFAULT_BANDS
    from lsw.pairs import TilePair
    from lsw.raster import normalize, select_bands
    from lsw.synthetic import ScarSpec, SceneSpec, generate_scene_pair

    scar = ScarSpec((size / 2, size / 2), size / 3, size / 8, 30.0) if positive else None
    spec = SceneSpec(size=size, seed=seed, has_landslide=positive, scar=scar, illumination_delta=illumination)
    before, after, truth = generate_scene_pair(spec)
    return TilePair(
        normalize(select_bands(before, DEFAULT_BANDS)),
        normalize(select_bands(after, DEFAULT_BANDS)),
        truth.label,
        truth.scar_bbox,
        f"synthetic_{seed}",
        before.timestamp,
        after.timestamp,
    )


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Record and print one PASS/FAIL line; the terminal summary repeats them."""
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
