"""Architecture parsing, network construction, and whole-network gradients."""

import io

import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from latticenet.arch import (
    ArchSpec,
    Conv,
    Dense,
    Dropout,
    Flatten,
    FULL_ARCH_STRING,
    Fuse,
    Network,
    ParseError,
    Pool,
    desk_spec,
    full_spec,
    load_checkpoint,
    parse_arch,
    render_arch,
    save_checkpoint,
)
from latticenet.fusion import FusionOp
from latticenet.layers import ConfigError
from latticenet.tensor import ShapeMismatchError

TOY = "C(4,3,1) → LF(average) → P(2) → FL → FC(10)"


# ---------------------------------------------------------------- parsing


def test_parse_full_string_node_count_and_kinds():
    nodes = parse_arch(FULL_ARCH_STRING)
    assert len(nodes) == 17
    kinds = [type(n).__name__ for n in nodes]
    assert kinds.count("Conv") == 5
    assert kinds.count("Fuse") == 3
    assert kinds.count("Pool") == 3
    assert kinds.count("Flatten") == 1
    assert kinds.count("Dense") == 3
    assert kinds.count("Dropout") == 2


def test_parse_accepts_ascii_arrow_and_case():
    nodes = parse_arch("c(8,3,1) -> lf(ADD) -> p(2) -> fl -> fc(10)")
    assert nodes == [Conv(8, 3, 1), Fuse(FusionOp.ADD), Pool(2), Flatten(), Dense(10)]


def test_render_round_trip():
    nodes = parse_arch(FULL_ARCH_STRING)
    text = render_arch(nodes)
    assert parse_arch(text) == nodes
    assert "→" in text


def test_render_canonicalizes_dropout_rate():
    assert render_arch([Dropout(0.4)]) == "D(0.4)"
    assert render_arch([Dropout(0.25)]) == "D(0.25)"


@pytest.mark.parametrize("bad,pos", [
    ("C(16,3) → FL → FC(10)", 0),
    ("C(16,3,1) → Q(2) → FL → FC(10)", 1),
    ("C(16,3,1) → P(x) → FL → FC(10)", 1),
    ("C(16,3,1) → P(2) → FL → FC()", 3),
    ("C(16,3,1) → LF(median) → FL → FC(10)", 1),
    ("C(16,3,1) → D(1.5) → FL → FC(10)", 1),
])
def test_parse_errors_carry_position(bad, pos):
    with pytest.raises(ParseError) as ei:
        parse_arch(bad)
    assert ei.value.position == pos
    assert ei.value.token  # offending token is reported


def test_parse_rejects_empty():
    with pytest.raises(ParseError):
        parse_arch("   ")


# ---------------------------------------------------------------- spec checks


def toy_spec(mode="lcnn", n_streams=2, arch=TOY, side=8):
    return ArchSpec(parse_arch(arch), side, n_streams, mode, "valid" if False else "same-for-3x3")


def test_spec_validation_rejects_bad_layouts():
    with pytest.raises(ConfigError):  # no flatten
        ArchSpec(parse_arch("C(4,3,1) → FC(10)"), 8, 1, "single", "same-for-3x3")
    with pytest.raises(ConfigError):  # conv after flatten
        ArchSpec(parse_arch("FL → C(4,3,1) → FC(10)"), 8, 1, "single", "same-for-3x3")
    with pytest.raises(ConfigError):  # must end with FC
        ArchSpec(parse_arch("C(4,3,1) → FL → FC(10) → D(0.4)"), 8, 1, "single", "same-for-3x3")
    with pytest.raises(ConfigError):  # sub fusion needs two streams
        ArchSpec(parse_arch("C(4,3,1) → LF(sub) → FL → FC(10)"), 8, 1, "single", "same-for-3x3")


def test_toy_param_count_hand_check():
    # per-stream conv 4*1*9+4 = 40; shared dense (4*4*4)*10+10 = 650; 2 streams
    net = Network(toy_spec(), seed=0)
    assert net.param_count() == 730


def test_desk_spec_geometry():
    spec = desk_spec("lcnn")
    geo, flat = spec.layer_geometry()
    assert flat == 32 * 4 * 4
    assert geo[-1] == (4, 32)


def test_full_spec_forward_shape():
    net = Network(full_spec("lcnn"), seed=0)
    xs = [np.zeros((1, 1, 224, 224), dtype=np.float32) for _ in range(2)]
    logits, _ = net.forward(xs)
    assert logits.shape == (1, 10)


# ---------------------------------------------------------------- gradients


def fd_check_network(mode, n_streams, arch=TOY, side=8, tol=1e-4):
    spec = ArchSpec(parse_arch(arch), side, n_streams, mode, "same-for-3x3")
    net = Network(spec, seed=3, dtype=np.float64)
    rng = np.random.default_rng(11)
    xs = [rng.normal(size=(2, 1, side, side)) for _ in range(n_streams)]
    labels = np.array([1, 7])

    from latticenet.layers import softmax_xent

    logits, cache = net.forward(xs, training=False)
    loss, gl = softmax_xent(logits, labels)
    grads = net.backward(cache, gl)
    params = net.params()
    worst = 0.0
    for name, w in params.items():
        def scalar(v, name=name, w=w):
            saved = w.copy()
            w[...] = v
            out, _ = net.forward(xs, training=False)
            l, _ = softmax_xent(out, labels)
            w[...] = saved
            return l
        num = numeric_grad(scalar, w.copy())
        worst = max(worst, rel_err(grads[name], num))
    assert worst <= tol, f"{mode}: worst rel err {worst}"


@pytest.mark.parametrize("mode,n", [
    ("lcnn", 2),
    ("mcnn", 2),
    ("xcnn", 2),
    ("single", 1),
])
def test_whole_network_gradcheck(mode, n):
    fd_check_network(mode, n)


def test_gradcheck_with_pool_cropping():
    # odd side forces the divisibility crop in front of P(2)
    fd_check_network("lcnn", 2, side=7)


def test_gradcheck_three_streams():
    fd_check_network("lcnn", 3)


# ---------------------------------------------------------------- invariants


def test_lcnn_tied_streams_degenerates_to_single(rng):
    spec2 = desk_spec("lcnn")
    spec1 = desk_spec("single")
    net2 = Network(spec2, seed=5, tie_streams=True)
    net1 = Network(spec1, seed=5)
    x = rng.normal(size=(2, 1, 32, 32)).astype(np.float32)
    out2, _ = net2.forward([x, x.copy()])
    out1, _ = net1.forward([x])
    assert np.array_equal(out2, out1)


def test_mcnn_concat_widens_first_dense():
    net = Network(desk_spec("mcnn"), seed=0)
    flat = desk_spec("mcnn").flat_length
    first = sorted(k for k in net.params() if k.startswith("head.fc") and k.endswith(".w"))[0]
    assert net.params()[first].shape == (128, 2 * flat)
    net_l = Network(desk_spec("lcnn"), seed=0)
    assert net_l.params()[first].shape == (128, flat)


def test_xcnn_has_cross_projections():
    net = Network(desk_spec("xcnn"), seed=0)
    cross = [k for k in net.params() if k.startswith("cross")]
    assert cross, "xcnn must own cross-projection parameters"
    assert not [k for k in Network(desk_spec("lcnn"), seed=0).params() if k.startswith("cross")]


def test_forward_is_pure_in_eval_mode(rng):
    net = Network(desk_spec("lcnn"), seed=2)
    xs = [rng.normal(size=(3, 1, 32, 32)).astype(np.float32) for _ in range(2)]
    a, _ = net.forward(xs)
    b, _ = net.forward([x.copy() for x in xs])
    assert np.array_equal(a, b)


def test_forward_rejects_wrong_stream_count(rng):
    net = Network(desk_spec("lcnn"), seed=2)
    with pytest.raises((ConfigError, ShapeMismatchError, ValueError)):
        net.forward([np.zeros((1, 1, 32, 32), dtype=np.float32)])


def test_seed_changes_weights():
    a = Network(desk_spec("lcnn"), seed=1).params()
    b = Network(desk_spec("lcnn"), seed=2).params()
    assert any(not np.array_equal(a[k], b[k]) for k in a)
    c = Network(desk_spec("lcnn"), seed=1).params()
    assert all(np.array_equal(a[k], c[k]) for k in a)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    net = Network(desk_spec("xcnn"), seed=9)
    path = tmp_path / "net.lckp"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.spec.mode == "xcnn"
    assert back.spec.arch_string() == net.spec.arch_string()
    assert back.seed == net.seed
    for k, v in net.params().items():
        assert np.array_equal(back.params()[k], v)
    x = rng.normal(size=(1, 1, 32, 32)).astype(np.float32)
    a, _ = net.forward([x, x])
    b, _ = back.forward([x, x])
    assert np.array_equal(a, b)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.lckp"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_checkpoint(p)
