"""Arrow-notation architecture parsing and multistream network construction.

The notation is the C/LF/P/FL/FC/D string from the model description, e.g.
``C(96,11,4) -> LF(average) -> P(2) -> FL -> FC(10)``. Networks can be wired
four ways:

* ``lcnn``   - every LF node fuses all streams' post-ReLU maps and the fused
               map is broadcast back as every stream's pooling input.
* ``mcnn``   - LF nodes are ignored; streams run independently and their
               flattened outputs are concatenated before the first FC.
* ``xcnn``   - LF nodes are ignored; after each pooling layer every stream
               receives additive learned 1x1-conv projections of the other
               streams' pooled maps ("xcnn-lite"); dense head shared over the
               concatenated flattened streams.
* ``single`` - one stream; LF(average)/LF(add) act as identity.

ReLU is implicit after every convolution and after every fully connected
layer except the last one.
"""

from __future__ import annotations

import re
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers
from .fusion import FusionOp, fuse_backward, fuse_forward
from .layers import ConfigError, ConvParams
from .tensor import load_tensor, save_tensor

MODES = ("lcnn", "mcnn", "xcnn", "single")
PADDING_POLICIES = ("valid", "same-for-3x3")

FULL_ARCH_STRING = (
    "C(96,11,4) → LF(average) → P(2) → C(256,11,1) → LF(average) → P(2) → "
    "C(384,3,1) → C(384,3,1) → C(256,3,1) → LF(average) → P(2) → FL → "
    "FC(4096) → D(0.4) → FC(4096) → D(0.4) → FC(10)"
)

DESK_ARCH_STRING = (
    "C(16,3,1) → LF(average) → P(2) → C(32,3,1) → LF(average) → P(2) → "
    "C(32,3,1) → C(32,3,1) → C(32,3,1) → LF(average) → P(2) → FL → "
    "FC(128) → D(0.4) → FC(128) → D(0.4) → FC(10)"
)


class ParseError(ValueError):
    def __init__(self, message: str, token: str, position: int):
        super().__init__(f"node {position}: {message}: {token!r}")
        self.token = token
        self.position = position


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    stride: int
    pad: int = 0


@dataclass(frozen=True)
class Fuse:
    op: FusionOp


@dataclass(frozen=True)
class Pool:
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Dropout:
    rate: float


_TOKEN_RE = re.compile(r"^([A-Za-z]+)(?:\((.*)\))?$")


def _int_args(raw, n, token, pos):
    if len(raw) != n:
        raise ParseError(f"expected {n} argument(s), got {len(raw)}", token, pos)
    out = []
    for a in raw:
        try:
            out.append(int(a))
        except ValueError:
            raise ParseError(f"non-integer argument {a!r}", token, pos) from None
    if any(v <= 0 for v in out):
        raise ParseError("arguments must be positive", token, pos)
    return out


def parse_arch(text: str):
    """Parse an arrow-notation string into a list of nodes."""
    pieces = [p.strip() for p in re.split(r"→|->", text)]
    pieces = [p for p in pieces if p != ""]
    if not pieces:
        raise ParseError("empty architecture string", text.strip(), 0)
    nodes = []
    for pos, token in enumerate(pieces):
        m = _TOKEN_RE.match(token)
        if not m:
            raise ParseError("malformed node", token, pos)
        name = m.group(1).upper()
        raw = [] if m.group(2) is None else [a.strip() for a in m.group(2).split(",")]
        if name == "C":
            d, f, s = _int_args(raw, 3, token, pos)
            nodes.append(Conv(d, f, s))
        elif name == "LF":
            if len(raw) != 1:
                raise ParseError("LF takes exactly one operation name", token, pos)
            try:
                nodes.append(Fuse(FusionOp.parse(raw[0])))
            except ValueError as e:
                raise ParseError(str(e), token, pos) from None
        elif name == "P":
            (s,) = _int_args(raw, 1, token, pos)
            nodes.append(Pool(s))
        elif name == "FL":
            if raw:
                raise ParseError("FL takes no arguments", token, pos)
            nodes.append(Flatten())
        elif name == "FC":
            (n,) = _int_args(raw, 1, token, pos)
            nodes.append(Dense(n))
        elif name == "D":
            if len(raw) != 1:
                raise ParseError("D takes exactly one rate", token, pos)
            try:
                p = float(raw[0])
            except ValueError:
                raise ParseError(f"non-numeric argument {raw[0]!r}", token, pos) from None
            if not 0.0 <= p < 1.0:
                raise ParseError("dropout rate must be in [0,1)", token, pos)
            nodes.append(Dropout(p))
        else:
            raise ParseError("unknown node name", token, pos)
    return nodes


def render_arch(nodes) -> str:
    """Canonical form: '→' separators, single spaces, lowercase fusion ops."""
    parts = []
    for node in nodes:
        if isinstance(node, Conv):
            parts.append(f"C({node.filters},{node.kernel},{node.stride})")
        elif isinstance(node, Fuse):
            parts.append(f"LF({node.op.value})")
        elif isinstance(node, Pool):
            parts.append(f"P({node.stride})")
        elif isinstance(node, Flatten):
            parts.append("FL")
        elif isinstance(node, Dense):
            parts.append(f"FC({node.units})")
        elif isinstance(node, Dropout):
            rate = f"{node.rate:g}"
            parts.append(f"D({rate})")
        else:
            raise TypeError(f"unknown node {node!r}")
    return " → ".join(parts)


@dataclass
class ArchSpec:
    nodes: list
    input_side: int
    n_streams: int
    mode: str
    padding_policy: str = "valid"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r} (valid: {', '.join(MODES)})")
        if self.padding_policy not in PADDING_POLICIES:
            raise ConfigError(f"unknown padding policy {self.padding_policy!r}")
        if self.mode == "single" and self.n_streams != 1:
            raise ConfigError("single mode requires n_streams == 1")
        if self.n_streams < 1:
            raise ConfigError("n_streams must be >= 1")
        self.nodes = [self._resolve_pad(n) for n in self.nodes]
        self._validate()

    def _resolve_pad(self, node):
        if isinstance(node, Conv):
            pad = node.kernel // 2 if (
                self.padding_policy == "same-for-3x3" and node.kernel == 3
            ) else 0
            return replace(node, pad=pad)
        return node

    def _validate(self):
        flat_seen = False
        n_flat = sum(isinstance(n, Flatten) for n in self.nodes)
        if n_flat != 1:
            raise ConfigError(f"architecture must contain exactly one FL node, found {n_flat}")
        if not self.nodes or not isinstance(self.nodes[-1], Dense):
            raise ConfigError("architecture must end with an FC node")
        for node in self.nodes:
            if isinstance(node, Flatten):
                flat_seen = True
            elif isinstance(node, (Conv, Pool, Fuse)) and flat_seen:
                raise ConfigError(f"{type(node).__name__} node not allowed after FL")
            elif isinstance(node, (Dense, Dropout)) and not flat_seen:
                raise ConfigError(f"{type(node).__name__} node not allowed before FL")
            if isinstance(node, Fuse) and self.n_streams < 2 and node.op in (
                FusionOp.SUB,
                FusionOp.ABSDIFF,
            ):
                raise ConfigError(f"LF({node.op.value}) requires at least 2 streams")
        self.layer_geometry()  # raises if any spatial size degenerates

    def layer_geometry(self):
        """Per-node (side, channels) after each pre-FL node, plus flat length.

        Pooling layers whose input side does not divide the stride crop the
        input down to the largest divisible extent first.
        """
        side, ch = self.input_side, 1
        geo = []
        for node in self.nodes:
            if isinstance(node, Conv):
                out = layers.conv_out_size(side, node.kernel, node.stride, node.pad)
                if out < 1:
                    raise ConfigError(
                        f"conv output collapses to {out} at {render_arch([node])} "
                        f"with input side {side}"
                    )
                side, ch = out, node.filters
            elif isinstance(node, Pool):
                if side < node.stride:
                    raise ConfigError(
                        f"pool stride {node.stride} exceeds input side {side}"
                    )
                side = side // node.stride
            elif isinstance(node, Flatten):
                break
            geo.append((side, ch))
        return geo, ch * side * side

    @property
    def flat_length(self) -> int:
        return self.layer_geometry()[1]

    def arch_string(self) -> str:
        return render_arch(self.nodes)


def desk_spec(mode: str, n_streams: int = 2) -> ArchSpec:
    if mode == "single":
        n_streams = 1
    return ArchSpec(parse_arch(DESK_ARCH_STRING), 32, n_streams, mode, "same-for-3x3")


def full_spec(mode: str, n_streams: int = 2) -> ArchSpec:
    if mode == "single":
        n_streams = 1
    return ArchSpec(parse_arch(FULL_ARCH_STRING), 224, n_streams, mode, "valid")


def _uniform_init(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _he_uniform_init(rng, shape, fan_in, dtype):
    """ReLU-scaled uniform init for conv and hidden dense layers; keeps the
    forward signal from shrinking through deep rectified stacks."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _crop_divisible(x, s):
    c, h, w, n = x.shape
    hc, wc = (h // s) * s, (w // s) * s
    if hc != h or wc != w:
        return x[:, :hc, :wc, :], (h, w)
    return x, None


class Network:
    """Instantiated multistream graph with per-stream conv weights, fusion
    points, optional cross-projections, and a shared dense head."""

    def __init__(self, spec: ArchSpec, seed: int, dtype=np.float32, tie_streams: bool = False):
        self.spec = spec
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.tie_streams = tie_streams
        self._params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._build()

    # -- construction -------------------------------------------------------

    def _rng(self, *key):
        return np.random.default_rng(np.random.SeedSequence([self.seed & 0xFFFFFFFF, *key]))

    def _build(self):
        spec = self.spec
        side, ch = spec.input_side, 1
        # Averaging n weakly correlated post-ReLU maps shrinks activation
        # variance by up to n, so layers behind fusion points start with
        # their He bound scaled back up by sqrt(n) per fusion crossed.
        # Tied streams are perfectly correlated, so no correction applies.
        fusion_gain = 1.0
        for i, node in enumerate(spec.nodes):
            if isinstance(node, Fuse):
                if (spec.mode == "lcnn" and node.op == "average"
                        and spec.n_streams > 1 and not self.tie_streams):
                    fusion_gain *= float(np.sqrt(spec.n_streams))
            elif isinstance(node, Conv):
                for k in range(spec.n_streams):
                    seed_stream = 0 if self.tie_streams else k
                    rng = self._rng(i, seed_stream)
                    w = _he_uniform_init(
                        rng,
                        (node.filters, ch, node.kernel, node.kernel),
                        fan_in=ch * node.kernel * node.kernel,
                        dtype=self.dtype,
                    )
                    if fusion_gain != 1.0:
                        w *= self.dtype.type(fusion_gain)
                    self._params[f"stream{k}.conv{i}.w"] = w
                    self._params[f"stream{k}.conv{i}.b"] = np.zeros(node.filters, self.dtype)
                side = layers.conv_out_size(side, node.kernel, node.stride, node.pad)
                ch = node.filters
            elif isinstance(node, Pool):
                if spec.mode == "xcnn" and spec.n_streams > 1:
                    for k in range(spec.n_streams):
                        for j in range(spec.n_streams):
                            if j == k:
                                continue
                            # cross-projections start at zero so the net
                            # begins as independent streams and learns how
                            # much cross-talk to add
                            w = np.zeros((ch, ch, 1, 1), self.dtype)
                            self._params[f"cross{i}.{j}to{k}.w"] = w
                            self._params[f"cross{i}.{j}to{k}.b"] = np.zeros(ch, self.dtype)
                side = side // node.stride
            elif isinstance(node, Flatten):
                flat = ch * side * side
                if spec.mode in ("mcnn", "xcnn"):
                    flat *= spec.n_streams
                width = flat
            elif isinstance(node, Dense):
                rng = self._rng(i, 9)
                if i == len(spec.nodes) - 1:  # linear output layer
                    w = _uniform_init(rng, (node.units, width), width, node.units, self.dtype)
                else:
                    w = _he_uniform_init(rng, (node.units, width), width, self.dtype)
                    if fusion_gain != 1.0:
                        w *= self.dtype.type(fusion_gain)
                        fusion_gain = 1.0
                self._params[f"head.fc{i}.w"] = w
                self._params[f"head.fc{i}.b"] = np.zeros(node.units, self.dtype)
                width = node.units

    def params(self) -> "OrderedDict[str, np.ndarray]":
        """Named parameters in fixed construction order; arrays are live."""
        return self._params

    def param_count(self) -> int:
        return sum(int(p.size) for p in self._params.values())

    def _conv_params(self, i, k):
        node = self.spec.nodes[i]
        return ConvParams(
            self._params[f"stream{k}.conv{i}.w"],
            self._params[f"stream{k}.conv{i}.b"],
            node.stride,
            node.pad,
        )

    def _cross_params(self, i, j, k):
        return ConvParams(
            self._params[f"cross{i}.{j}to{k}.w"],
            self._params[f"cross{i}.{j}to{k}.b"],
            1,
            0,
        )

    # -- forward ------------------------------------------------------------

    def forward(self, inputs, training: bool = False, step: int = 0):
        """Run the network on one tensor per stream; returns (logits, cache)."""
        spec = self.spec
        if len(inputs) != spec.n_streams:
            raise ConfigError(
                f"expected {spec.n_streams} input stream(s), got {len(inputs)}"
            )
        ref = inputs[0].shape
        for x in inputs[1:]:
            if x.shape != ref:
                raise ConfigError(f"stream input shapes differ: {ref} vs {x.shape}")
        if ref[2] != spec.input_side or ref[3] != spec.input_side:
            raise ConfigError(
                f"input side {ref[2]}x{ref[3]} does not match spec side {spec.input_side}"
            )
        # center unit-interval pixel/edge inputs so first-layer activations
        # start sign-balanced; a constant shift, invisible to gradients
        acts = [
            layers.to_chwn(np.asarray(x, dtype=self.dtype) - self.dtype.type(0.5))
            for x in inputs
        ]
        cache = {"steps": {}, "training": training, "batch": ref[0]}
        lattice = spec.mode in ("lcnn", "single")
        head = None
        for i, node in enumerate(spec.nodes):
            if isinstance(node, Conv):
                pre = []
                for k in range(spec.n_streams):
                    z = layers.conv2d_forward_chwn(acts[k], self._conv_params(i, k))
                    pre.append((acts[k], z))
                    acts[k] = layers.relu_forward(z)
                cache["steps"][i] = pre
            elif isinstance(node, Fuse):
                if not lattice:
                    continue
                fused = fuse_forward(node.op, acts)
                cache["steps"][i] = list(acts)
                acts = [fused] + [fused.copy() for _ in range(spec.n_streams - 1)]
            elif isinstance(node, Pool):
                entries = []
                for k in range(spec.n_streams):
                    x, orig = _crop_divisible(acts[k], node.stride)
                    pooled = layers.maxpool_forward_fast_chwn(x, node.stride)
                    entries.append({"x": x, "pooled": pooled, "orig": orig})
                    acts[k] = pooled
                if spec.mode == "xcnn" and spec.n_streams > 1:
                    pooled_maps = list(acts)
                    cache["steps"][i] = {"pool": entries, "maps": pooled_maps}
                    out = []
                    for k in range(spec.n_streams):
                        y = pooled_maps[k].copy()
                        for j in range(spec.n_streams):
                            if j == k:
                                continue
                            y += layers.conv2d_forward_chwn(
                                pooled_maps[j], self._cross_params(i, j, k)
                            )
                        out.append(y)
                    acts = out
                else:
                    cache["steps"][i] = {"pool": entries}
            elif isinstance(node, Flatten):
                n = ref[0]
                flats = [layers.to_nchw(a).reshape(n, -1) for a in acts]
                cache["steps"][i] = {"map_shape": acts[0].shape}
                if spec.mode in ("mcnn", "xcnn"):
                    head = np.concatenate(flats, axis=1)
                else:
                    head = fuse_forward(FusionOp.AVERAGE, flats)
                    cache["steps"][i]["flats"] = flats
            elif isinstance(node, Dense):
                w = self._params[f"head.fc{i}.w"]
                b = self._params[f"head.fc{i}.b"]
                z = layers.dense_forward(head, w, b)
                last = i == len(spec.nodes) - 1
                cache["steps"][i] = {"x": head, "z": z, "last": last}
                head = z if last else layers.relu_forward(z)
            elif isinstance(node, Dropout):
                head, mask = layers.dropout_forward(
                    head, node.rate, training, self.seed, i, step
                )
                cache["steps"][i] = {"mask": mask}
        return head, cache

    # -- backward -----------------------------------------------------------

    def backward(self, cache, grad_logits):
        """Gradients of a scalar loss w.r.t. every parameter, given the
        gradient at the logits and the cache of the matching forward."""
        spec = self.spec
        grads = OrderedDict(
            (name, np.zeros_like(p)) for name, p in self._params.items()
        )
        g = np.asarray(grad_logits, dtype=self.dtype)
        stream_grads = None
        for i in range(len(spec.nodes) - 1, -1, -1):
            node = spec.nodes[i]
            step = cache["steps"].get(i)
            if isinstance(node, Dense):
                if not step["last"]:
                    g = layers.relu_backward(step["z"], g)
                w = self._params[f"head.fc{i}.w"]
                g, gw, gb = layers.dense_backward(step["x"], w, g)
                grads[f"head.fc{i}.w"] += gw
                grads[f"head.fc{i}.b"] += gb
            elif isinstance(node, Dropout):
                g = layers.dropout_backward(step["mask"], g)
            elif isinstance(node, Flatten):
                c, h, w, n = step["map_shape"]
                if spec.mode in ("mcnn", "xcnn"):
                    seg = c * h * w
                    stream_grads = [
                        layers.to_chwn(
                            np.ascontiguousarray(
                                g[:, k * seg : (k + 1) * seg]
                            ).reshape(n, c, h, w)
                        )
                        for k in range(spec.n_streams)
                    ]
                else:
                    parts = fuse_backward(FusionOp.AVERAGE, step["flats"], g)
                    stream_grads = [
                        layers.to_chwn(p.reshape(n, c, h, w)) for p in parts
                    ]
            elif isinstance(node, Pool):
                if spec.mode == "xcnn" and spec.n_streams > 1:
                    maps = step["maps"]
                    pooled_grads = []
                    for k in range(spec.n_streams):
                        gk = stream_grads[k].copy()
                        for j in range(spec.n_streams):
                            if j == k:
                                continue
                            gx, gw, gb = layers.conv2d_backward_chwn(
                                maps[k], self._cross_params(i, k, j), stream_grads[j]
                            )
                            gk += gx
                            grads[f"cross{i}.{k}to{j}.w"] += gw
                            grads[f"cross{i}.{k}to{j}.b"] += gb
                        pooled_grads.append(gk)
                    stream_grads = pooled_grads
                out = []
                for k, entry in enumerate(step["pool"]):
                    gx = layers.maxpool_backward_fast_chwn(
                        entry["x"], entry["pooled"], stream_grads[k], node.stride
                    )
                    if entry["orig"] is not None:
                        h, w_ = entry["orig"]
                        full = np.zeros(
                            (gx.shape[0], h, w_, gx.shape[3]), dtype=gx.dtype
                        )
                        full[:, : gx.shape[1], : gx.shape[2], :] = gx
                        gx = full
                    out.append(gx)
                stream_grads = out
            elif isinstance(node, Fuse):
                if spec.mode not in ("lcnn", "single"):
                    continue
                total = stream_grads[0]
                for gk in stream_grads[1:]:
                    total = total + gk
                stream_grads = fuse_backward(node.op, step, total)
            elif isinstance(node, Conv):
                out = []
                for k in range(spec.n_streams):
                    x, z = step[k]
                    gz = layers.relu_backward(z, stream_grads[k])
                    gx, gw, gb = layers.conv2d_backward_chwn(
                        x, self._conv_params(i, k), gz, need_grad_x=i > 0
                    )
                    grads[f"stream{k}.conv{i}.w"] += gw
                    grads[f"stream{k}.conv{i}.b"] += gb
                    out.append(gx)
                stream_grads = out
        return grads


# -- checkpoint I/O ---------------------------------------------------------

CHECKPOINT_MAGIC = b"LCKP"


def save_checkpoint(net: Network, path) -> None:
    spec = net.spec
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        arch = spec.arch_string().encode("utf-8")
        fh.write(struct.pack("<I", len(arch)))
        fh.write(arch)
        mode = spec.mode.encode()
        fh.write(struct.pack("<B", len(mode)))
        fh.write(mode)
        fh.write(struct.pack("<I", spec.n_streams))
        fh.write(struct.pack("<Q", net.seed))
        fh.write(struct.pack("<I", spec.input_side))
        policy = spec.padding_policy.encode()
        fh.write(struct.pack("<B", len(policy)))
        fh.write(policy)
        for name, p in net.params().items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            save_tensor(fh, p)


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (alen,) = struct.unpack("<I", fh.read(4))
        arch = fh.read(alen).decode("utf-8")
        (mlen,) = struct.unpack("<B", fh.read(1))
        mode = fh.read(mlen).decode()
        (n_streams,) = struct.unpack("<I", fh.read(4))
        (seed,) = struct.unpack("<Q", fh.read(8))
        (side,) = struct.unpack("<I", fh.read(4))
        (plen,) = struct.unpack("<B", fh.read(1))
        policy = fh.read(plen).decode()
        spec = ArchSpec(parse_arch(arch), side, n_streams, mode, policy)
        loaded = OrderedDict()
        while True:
            raw = fh.read(2)
            if not raw:
                break
            (nlen,) = struct.unpack("<H", raw)
            name = fh.read(nlen).decode()
            loaded[name] = load_tensor(fh)
    dtype = next(iter(loaded.values())).dtype if loaded else np.float32
    net = Network(spec, seed, dtype=dtype)
    params = net.params()
    if list(params.keys()) != list(loaded.keys()):
        raise ValueError("checkpoint parameter names do not match the architecture")
    for name, arr in loaded.items():
        if params[name].shape != arr.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        params[name][...] = arr
    return net
