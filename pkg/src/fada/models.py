"""Component networks (G, D, C, CI, DI, R, M) built from tensor primitives.

Architectures follow three families: ``digit`` (conv generator), ``sentiment``
(fully connected, 400-d bag-of-words input by default) and ``image`` (features
from a frozen backbone, replaced here by one FC stand-in layer). Hidden widths
are multiplied by ``width_scale``; input width, class count, the 2-way domain
output and the scalar MINE output never scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02
LEAKY_SLOPE = 0.2

KINDS = ("generator", "disentangler", "classifier", "class_identifier",
         "domain_identifier", "reconstructor", "mine")
SOURCE_KINDS = ("generator", "disentangler", "classifier", "class_identifier", "reconstructor", "mine")
# The target also carries a disentangler: its classifier reads f_di, not G's output.
TARGET_KINDS = ("generator", "disentangler", "classifier")
SHORT = {"generator": "G", "disentangler": "D", "classifier": "C", "class_identifier": "CI",
         "domain_identifier": "DI", "reconstructor": "R", "mine": "M"}


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class Hidden:
    """A hidden width that scales: ``mul * max(1, round(width * scale))``."""

    width: int
    mul: int = 1

    def resolve(self, scale: float) -> int:
        return self.mul * max(1, int(round(self.width * scale)))


def _dim(d, scale: float) -> int:
    return d.resolve(scale) if isinstance(d, Hidden) else int(d)


@dataclass
class ComponentSpec:
    """Layer stages for one component.

    ``stages`` is a list of layer-descriptor lists. Sequential components use a
    single stage. The disentangler uses ``[trunk..., head]`` and instantiates
    the head twice; MINE uses ``[fc1_x, fc1_y, out]``.
    """

    kind: str
    stages: list[list[tuple]]
    width_scale: float = 1.0
    input_shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArchitectureError(f"unknown component kind {self.kind!r}")
        if self.width_scale <= 0:
            raise ArchitectureError(f"width_scale must be positive, got {self.width_scale}")


# ------------------------------------------------------------------- layers


class Stack:
    """An ordered run of layers with named parameters and BN buffers."""

    def __init__(self, layers: list[tuple], scale: float, in_shape: tuple[int, ...],
                 rng: np.random.Generator, prefix: str):
        self.layers: list[tuple] = []
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        shape = tuple(in_shape)
        for idx, desc in enumerate(layers):
            kind, args = desc[0], desc[1:]
            name = f"{prefix}{idx}"
            if kind == "fc":
                fan_in, fan_out = _dim(args[0], scale), _dim(args[1], scale)
                if len(shape) != 1 or shape[0] != fan_in:
                    raise ArchitectureError(f"{name}: FC expects width {fan_in}, got input shape {shape}")
                self._param(f"{name}.weight", rng.normal(0.0, INIT_STD, (fan_in, fan_out)))
                self._param(f"{name}.bias", np.zeros(fan_out))
                self.layers.append(("fc", name))
                shape = (fan_out,)
            elif kind == "conv":
                cin, cout = _dim(args[0], scale), _dim(args[1], scale)
                k, stride, pad = args[2], args[3], args[4]
                if len(shape) != 3 or shape[0] != cin:
                    raise ArchitectureError(f"{name}: conv expects {cin} channels, got input shape {shape}")
                self._param(f"{name}.weight", rng.normal(0.0, INIT_STD, (cout, cin, k, k)))
                self._param(f"{name}.bias", np.zeros(cout))
                self.layers.append(("conv", name, stride, pad))
                h = (shape[1] + 2 * pad - k) // stride + 1
                w = (shape[2] + 2 * pad - k) // stride + 1
                shape = (cout, h, w)
            elif kind == "bn":
                c = shape[0]
                self._param(f"{name}.gamma", np.ones(c))
                self._param(f"{name}.beta", np.zeros(c))
                self.buffers[f"{name}.running_mean"] = np.zeros(c)
                self.buffers[f"{name}.running_var"] = np.ones(c)
                self.layers.append(("bn", name))
            elif kind == "maxpool":
                window, stride = args[0], args[1]
                if len(shape) != 3:
                    raise ArchitectureError(f"{name}: maxpool needs a CHW input, got {shape}")
                self.layers.append(("maxpool", window, stride))
                shape = (shape[0], (shape[1] - window) // stride + 1, (shape[2] - window) // stride + 1)
            elif kind == "flatten":
                self.layers.append(("flatten",))
                shape = (int(np.prod(shape)),)
            elif kind in ("relu", "softmax"):
                self.layers.append((kind,))
            elif kind == "leaky":
                self.layers.append(("leaky", args[0] if args else LEAKY_SLOPE))
            elif kind == "dropout":
                self.layers.append(("dropout", args[0]))
            else:
                raise ArchitectureError(f"{name}: unknown layer kind {kind!r}")
        self.out_shape = shape

    def _param(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def forward(self, x: Tensor, train: bool = True, rng: np.random.Generator | None = None) -> Tensor:
        for layer in self.layers:
            kind = layer[0]
            if kind == "fc":
                n = layer[1]
                x = T.add(T.matmul(x, self.params[f"{n}.weight"]), self.params[f"{n}.bias"])
            elif kind == "conv":
                n = layer[1]
                x = T.conv2d(x, self.params[f"{n}.weight"], self.params[f"{n}.bias"], layer[2], layer[3])
            elif kind == "bn":
                n = layer[1]
                x = T.batchnorm(x, self.params[f"{n}.gamma"], self.params[f"{n}.beta"],
                                self.buffers[f"{n}.running_mean"], self.buffers[f"{n}.running_var"], train=train)
            elif kind == "maxpool":
                x = T.maxpool2d(x, layer[1], layer[2])
            elif kind == "flatten":
                x = T.reshape(x, (x.shape[0], -1))
            elif kind == "relu":
                x = T.relu(x)
            elif kind == "leaky":
                x = T.leaky_relu(x, layer[1])
            elif kind == "softmax":
                x = T.softmax(x, axis=1)
            elif kind == "dropout":
                x = T.dropout(x, layer[1], rng, train=train)
        return x


class Component:
    """A built parameter set. Subclasses define the forward topology."""

    kind: str

    def __init__(self, spec: ComponentSpec, stacks: dict[str, Stack]):
        self.spec = spec
        self.kind = spec.kind
        self.stacks = stacks

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        for s in self.stacks.values():
            out.update(s.params)
        return out

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for s in self.stacks.values():
            out.update(s.buffers)
        return out

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        """Copy of parameters and buffers, in a fixed order."""
        st = {k: v.data.copy() for k, v in self.params.items()}
        st.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return st

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.params, self.buffers
        expected = set(params) | {f"buffer:{k}" for k in buffers}
        if set(state) != expected:
            raise ArchitectureError(f"{self.kind}: state keys do not match component layout")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ArchitectureError(f"{self.kind}: {k} has shape {state[k].shape}, expected {p.shape}")
            p.data[...] = state[k]
        for k, b in buffers.items():
            b[...] = state[f"buffer:{k}"]

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.state().values()])

    def unflatten(self, vec: np.ndarray) -> None:
        st, off = {}, 0
        for k, v in self.state().items():
            st[k] = vec[off:off + v.size].reshape(v.shape)
            off += v.size
        if off != vec.size:
            raise ArchitectureError(f"{self.kind}: flat vector has {vec.size} entries, expected {off}")
        self.load_state(st)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: p.grad for k, p in self.params.items()}


class Sequential(Component):
    def __call__(self, x, train=True, rng=None) -> Tensor:
        return self.stacks["main"].forward(T.as_tensor(x), train, rng)

    @property
    def out_shape(self):
        return self.stacks["main"].out_shape


class Disentangler(Component):
    def __call__(self, h, train=True, rng=None) -> tuple[Tensor, Tensor]:
        z = self.stacks["trunk"].forward(T.as_tensor(h), train, rng)
        return self.stacks["di"].forward(z, train, rng), self.stacks["ds"].forward(z, train, rng)

    @property
    def out_shape(self):
        return self.stacks["di"].out_shape


class Mine(Component):
    def __call__(self, p, q, train=True, rng=None) -> Tensor:
        p, q = T.as_tensor(p), T.as_tensor(q)
        if p.shape[0] != q.shape[0]:
            raise T.ShapeError(f"mine_forward: batch counts differ, {p.shape} and {q.shape}")
        hx = self.stacks["fc1_x"].forward(p, train, rng)
        hy = self.stacks["fc1_y"].forward(q, train, rng)
        h = T.leaky_relu(T.add(hx, hy), LEAKY_SLOPE)
        out = self.stacks["out"].forward(h, train, rng)
        return T.reshape(out, (out.shape[0],))


def build(spec: ComponentSpec, rng: np.random.Generator) -> Component:
    """Instantiate ``spec`` with N(0, 0.02^2) weights and zero biases."""
    s = spec.width_scale
    if spec.kind == "disentangler":
        *trunk, head = spec.stages
        trunk_layers = [layer for stage in trunk for layer in stage]
        t = Stack(trunk_layers, s, spec.input_shape, rng, "trunk.")
        di = Stack(head, s, t.out_shape, rng, "di.")
        ds = Stack(head, s, t.out_shape, rng, "ds.")
        return Disentangler(spec, {"trunk": t, "di": di, "ds": ds})
    if spec.kind == "mine":
        fx, fy, out = spec.stages
        in_x = spec.input_shape
        sx = Stack(fx, s, in_x, rng, "fc1_x.")
        sy = Stack(fy, s, in_x, rng, "fc1_y.")
        if sx.out_shape != sy.out_shape:
            raise ArchitectureError("mine: branch widths differ")
        so = Stack(out, s, sx.out_shape, rng, "out.")
        return Mine(spec, {"fc1_x": sx, "fc1_y": sy, "out": so})
    layers = [layer for stage in spec.stages for layer in stage]
    return Sequential(spec, {"main": Stack(layers, s, spec.input_shape, rng, "")})


# ----------------------------------------------------------------- families

FAMILIES = ("digit", "sentiment", "image")
DEFAULT_SCALE = {"digit": 1 / 8, "sentiment": 1.0, "image": 1 / 8}


def family_specs(family: str, width_scale: float | None = None, input_dim: int | None = None,
                 num_classes: int = 10, image_size: int = 32, in_channels: int = 3) -> dict[str, ComponentSpec]:
    """ComponentSpecs for every role in one architecture family."""
    if family not in FAMILIES:
        raise ArchitectureError(f"unknown model family {family!r}; expected one of {FAMILIES}")
    s = DEFAULT_SCALE[family] if width_scale is None else width_scale
    K = num_classes
    bn_relu = [("bn",), ("relu",)]
    if family == "digit":
        if image_size % 4:
            raise ArchitectureError(f"digit family needs image_size divisible by 4, got {image_size}")
        spatial = (image_size // 4) ** 2
        g_in = (in_channels, image_size, image_size)
        gen = [[("conv", in_channels, Hidden(64), 5, 1, 2), *bn_relu, ("maxpool", 2, 2)],
               [("conv", Hidden(64), Hidden(64), 5, 1, 2), *bn_relu, ("maxpool", 2, 2)],
               [("conv", Hidden(64), Hidden(128), 5, 1, 2), *bn_relu, ("flatten",)]]
        g_out = Hidden(128, mul=spatial)
        dis = [[("fc", g_out, Hidden(3072)), *bn_relu],
               [("dropout", 0.5), ("fc", Hidden(3072), Hidden(2048)), *bn_relu]]
        f, di_hidden, m_hidden = Hidden(2048), Hidden(256), Hidden(512)
    elif family == "sentiment":
        d = 400 if input_dim is None else input_dim
        g_in = (d,)
        gen = [[("fc", d, Hidden(128)), *bn_relu]]
        g_out = Hidden(128)
        dis = [[("fc", g_out, Hidden(64)), *bn_relu],
               [("dropout", 0.5), ("fc", Hidden(64), Hidden(32)), *bn_relu]]
        f, di_hidden, m_hidden = Hidden(32), Hidden(32), Hidden(16)
    else:
        d = 4096 if input_dim is None else input_dim
        g_in = (d,)
        gen = [[("fc", d, Hidden(2048)), *bn_relu]]
        g_out = Hidden(2048)
        dis = [[("dropout", 0.5), ("fc", g_out, Hidden(2048)), *bn_relu],
               [("dropout", 0.5), ("fc", Hidden(2048), Hidden(2048)), *bn_relu]]
        f, di_hidden, m_hidden = Hidden(2048), Hidden(256), Hidden(512)
    gw, fw = _dim(g_out, s), _dim(f, s)
    head = [[("fc", f, K), ("bn",), ("softmax",)]]
    return {
        "generator": ComponentSpec("generator", gen, s, g_in),
        "disentangler": ComponentSpec("disentangler", dis, s, (gw,)),
        "classifier": ComponentSpec("classifier", head, s, (fw,)),
        "class_identifier": ComponentSpec("class_identifier", head, s, (fw,)),
        "domain_identifier": ComponentSpec(
            "domain_identifier", [[("fc", g_out, di_hidden), ("leaky",), ("fc", di_hidden, 2), ("leaky",), ("softmax",)]], s, (gw,)),
        "reconstructor": ComponentSpec("reconstructor", [[("fc", Hidden(f.width, mul=2), g_out)]], s, (2 * fw,)),
        "mine": ComponentSpec("mine", [[("fc", f, m_hidden)], [("fc", f, m_hidden)], [("fc", m_hidden, 1)]], s, (fw,)),
    }


@dataclass
class ModelBundle:
    role: str
    components: dict[str, Component] = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ArchitectureError(f"bundle role must be 'source' or 'target', got {self.role!r}")
        if self.role == "target":
            extra = set(self.components) - set(TARGET_KINDS)
            if extra:
                raise ArchitectureError(f"target bundle cannot hold {sorted(extra)}")

    def __getitem__(self, kind: str) -> Component:
        return self.components[kind]

    def num_params(self) -> int:
        return sum(c.num_params() for c in self.components.values())

    def state(self, kinds: Iterable[str] | None = None) -> dict[str, dict[str, np.ndarray]]:
        kinds = self.components if kinds is None else kinds
        return {k: self.components[k].state() for k in kinds}

    def load_state(self, state: dict[str, dict[str, np.ndarray]]) -> None:
        for k, st in state.items():
            self.components[k].load_state(st)


def build_bundle(specs: dict[str, ComponentSpec], role: str, rng: np.random.Generator) -> ModelBundle:
    kinds = SOURCE_KINDS if role == "source" else TARGET_KINDS
    return ModelBundle(role, {k: build(specs[k], rng) for k in kinds})


def forward_disentangle(G: Sequential, D: Disentangler, x, train: bool = True,
                        rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Split ``G(x)`` into domain-invariant and domain-specific features."""
    return D(G(x, train, rng), train, rng)


def mine_forward(M: Mine, p, q, train: bool = True) -> Tensor:
    return M(p, q, train)


def predict_proba(bundle: ModelBundle, x) -> np.ndarray:
    """Eval-mode class probabilities along the G -> D(di) -> C path."""
    with T.no_grad():
        f_di, _ = forward_disentangle(bundle["generator"], bundle["disentangler"], x, train=False)
        return bundle["classifier"](f_di, train=False).data


def features(bundle: ModelBundle, x) -> np.ndarray:
    with T.no_grad():
        return bundle["generator"](x, train=False).data


# --------------------------------------------------------------- checkpoints

_MAGIC = b"FADACKPT"


def save_checkpoint(path: str | Path, component: Component) -> None:
    """Write ``magic | u64 header length | JSON header | little-endian f64 data``."""
    st = component.state()
    header = {"component": component.kind,
              "entries": [{"name": k, "shape": list(v.shape)} for k, v in st.items()]}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = np.concatenate([v.ravel() for v in st.values()]).astype("<f8") if st else np.zeros(0, "<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(body.tobytes())


def read_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    out, off = {}, 0
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = data[off:off + n].astype(np.float64).reshape(e["shape"])
        off += n
    if off != data.size:
        raise ValueError(f"{path}: payload length does not match header")
    return header["component"], out


def load_checkpoint(path: str | Path, component: Component) -> None:
    kind, st = read_checkpoint(path)
    if kind != component.kind:
        raise ArchitectureError(f"{path}: holds a {kind}, not a {component.kind}")
    component.load_state(st)
