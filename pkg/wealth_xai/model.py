"""
model: Small fully convolutional regressor with exact reverse-mode gradients.

Purpose: Stand-in for the MobileNet-V2 nightlight regressor. Six 3×3 conv blocks
with ReLU, two 2×2 average pools, global average pooling to a D-vector of features
and an affine head producing one scalar.

Behavior:
- Tensors are NHWC float64 internally; tiles come in as H×W×3
- Every layer implements `forward(x) -> (y, cache)` and
  `backward(dy, cache, guided) -> (dx, grads)`; nothing is stored on the layer, so
  queries on a frozen net are read-only and safe to run concurrently
- `guided=True` switches ReLU backward to guided backpropagation: entries negative
  in either the forward activation or the incoming signal are zeroed
- The network is fully convolutional: a 672 px mosaic yields a 21×21 final map that
  is averaged like the 7×7 map of a 224 px tile

Checkpoint format:
- 8-byte magic `WXAICKPT`, uint32 little-endian header length, UTF-8 JSON header
  (architecture + ordered parameter manifest with shapes and offsets), then every
  parameter as little-endian float32 in manifest order
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import DataError
from .raster import RasterTile

Unit = Union[str, int]
OUTPUT = "output"

CHECKPOINT_MAGIC = b"WXAICKPT"
DEFAULT_CHANNELS = (8, 16, 32, 32, 64)
DEFAULT_FEATURE_DIM = 64
DEFAULT_INPUT_SIDES = (224, 672)


class Layer:
    name: str = ""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache, guided: bool = False):
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError


class Conv2d(Layer):
    """k×k convolution, zero padding, NHWC; weight shape (k, k, C_in, C_out)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int | None = None, name: str = "conv"):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        k = self.weight.shape[0]
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.name = name

    @property
    def kernel(self) -> int:
        return self.weight.shape[0]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def spec(self):
        k, _, cin, cout = self.weight.shape
        return {"type": "conv", "name": self.name, "kernel": k, "in": cin, "out": cout,
                "stride": self.stride, "padding": self.padding}

    def _out_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel) // self.stride + 1

    def _window(self, xp: np.ndarray, i: int, j: int, ho: int, wo: int) -> np.ndarray:
        s = self.stride
        return xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]

    def forward(self, x):
        n, h, w, _ = x.shape
        p = self.padding
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        ho, wo = self._out_size(h), self._out_size(w)
        y = np.broadcast_to(self.bias, (n, ho, wo, self.bias.shape[0])).copy()
        for i in range(self.kernel):
            for j in range(self.kernel):
                y += self._window(xp, i, j, ho, wo) @ self.weight[i, j]
        return y, (xp, x.shape)

    def backward(self, dy, cache, guided=False):
        xp, shape = cache
        _, h, w, cin = shape
        ho, wo = dy.shape[1:3]
        p = self.padding
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(self.weight)
        dy2 = dy.reshape(-1, dy.shape[-1])
        s = self.stride
        for i in range(self.kernel):
            for j in range(self.kernel):
                win = self._window(xp, i, j, ho, wo)
                dw[i, j] = win.reshape(-1, cin).T @ dy2
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dy @ self.weight[i, j].T
        dx = dxp[:, p:p + h, p:p + w, :] if p else dxp
        return dx, {"weight": dw, "bias": dy2.sum(axis=0)}


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name

    def spec(self):
        return {"type": "relu", "name": self.name}

    def forward(self, x):
        y = np.maximum(x, 0.0)
        return y, y > 0

    def backward(self, dy, cache, guided=False):
        mask = cache
        if guided:
            return dy * (mask & (dy > 0)), {}
        return dy * mask, {}


class AvgPool2d(Layer):
    def __init__(self, size: int = 2, name: str = "pool"):
        self.size = size
        self.name = name

    def spec(self):
        return {"type": "avgpool", "name": self.name, "size": self.size}

    def forward(self, x):
        n, h, w, c = x.shape
        s = self.size
        if h % s or w % s:
            raise DataError(f"{self.name}: spatial size {h}×{w} not divisible by pool size {s}")
        return x.reshape(n, h // s, s, w // s, s, c).mean(axis=(2, 4)), None

    def backward(self, dy, cache, guided=False):
        s = self.size
        dx = np.repeat(np.repeat(dy, s, axis=1), s, axis=2) / (s * s)
        return dx, {}


class GlobalAvgPool(Layer):
    def __init__(self, name: str = "gap"):
        self.name = name

    def spec(self):
        return {"type": "gap", "name": self.name}

    def forward(self, x):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dy, cache, guided=False):
        n, h, w, c = cache
        return np.broadcast_to(dy[:, None, None, :] / (h * w), (n, h, w, c)).copy(), {}


class Linear(Layer):
    """Affine head: (N, D) -> (N,)."""

    def __init__(self, weight: np.ndarray, bias: float | np.ndarray, name: str = "head"):
        self.weight = np.asarray(weight, dtype=np.float64).reshape(-1)
        self.bias = np.asarray(bias, dtype=np.float64).reshape(1)
        self.name = name

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def spec(self):
        return {"type": "linear", "name": self.name, "in": int(self.weight.shape[0])}

    def forward(self, x):
        return x @ self.weight + self.bias[0], x

    def backward(self, dy, cache, guided=False):
        x = cache
        return np.outer(dy, self.weight), {"weight": x.T @ dy, "bias": np.array([dy.sum()])}


@dataclass
class Trace:
    """Forward activations (index 0 is the input) and per-layer caches."""

    activations: list[np.ndarray]
    caches: list


class ConvNet:
    """Ordered layer stack ending in global average pooling and an affine head.

    `layers` is everything up to and including the GlobalAvgPool; the GAP output is
    the feature vector. Layer ids are the layer names.
    """

    def __init__(self, layers: Sequence[Layer], head: Linear, input_sides: Iterable[int] = DEFAULT_INPUT_SIDES):
        self.layers = list(layers)
        self.head = head
        self.input_sides = tuple(int(s) for s in input_sides)
        names = [layer.name for layer in self.layers] + [head.name]
        if len(set(names)) != len(names):
            raise DataError(f"layer names must be unique: {names}")
        if not isinstance(self.layers[-1], GlobalAvgPool):
            raise DataError("the feature stack must end with global average pooling")

    @classmethod
    def build(
        cls,
        feature_dim: int = DEFAULT_FEATURE_DIM,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        seed: int = 0,
        input_sides: Iterable[int] = DEFAULT_INPUT_SIDES,
    ) -> "ConvNet":
        """Six 3×3 conv blocks (stride 2 on blocks 2, 4, 6), 2×2 average pools after
        blocks 2 and 4, fan-in-scaled uniform initialisation."""
        rng = np.random.default_rng(seed)
        widths = [3, *channels, feature_dim]
        if len(widths) != 7:
            raise DataError(f"expected five hidden channel widths, got {list(channels)}")
        layers: list[Layer] = []
        for b in range(6):
            cin, cout = widths[b], widths[b + 1]
            bound = 1.0 / np.sqrt(cin * 9)
            weight = rng.uniform(-bound, bound, size=(3, 3, cin, cout)) * np.sqrt(6.0)
            bias = rng.uniform(-bound, bound, size=cout)
            stride = 2 if b % 2 == 1 else 1
            layers.append(Conv2d(weight, bias, stride=stride, padding=1, name=f"conv{b + 1}"))
            layers.append(ReLU(name=f"relu{b + 1}"))
            if b in (1, 3):
                layers.append(AvgPool2d(2, name=f"pool{b // 2 + 1}"))
        layers.append(GlobalAvgPool("gap"))
        bound = 1.0 / np.sqrt(feature_dim)
        head = Linear(rng.uniform(-bound, bound, size=feature_dim), 0.0)
        return cls(layers, head, input_sides)

    # --- introspection ---------------------------------------------------------

    @property
    def feature_dim(self) -> int:
        return int(self.head.weight.shape[0])

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def layer_index(self, layer_id: str | int) -> int:
        if isinstance(layer_id, (int, np.integer)):
            if not 0 <= layer_id < len(self.layers):
                raise DataError(f"layer index {layer_id} out of range 0..{len(self.layers) - 1}")
            return int(layer_id)
        try:
            return self.layer_names.index(layer_id)
        except ValueError:
            raise DataError(f"unknown layer {layer_id!r}; layers: {self.layer_names}") from None

    def last_conv_layer(self) -> str:
        """Name of the activation that closes the last conv block (ReLU output if present)."""
        idx = max(i for i, layer in enumerate(self.layers) if isinstance(layer, Conv2d))
        if idx + 1 < len(self.layers) and isinstance(self.layers[idx + 1], ReLU):
            idx += 1
        return self.layers[idx].name

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable parameter, in layer order."""
        out = {}
        for layer in [*self.layers, self.head]:
            for pname, arr in layer.params().items():
                out[f"{layer.name}.{pname}"] = arr
        return out

    def copy(self) -> "ConvNet":
        clone = load_state(self.architecture(), {k: v.copy() for k, v in self.parameters().items()})
        clone.input_sides = self.input_sides
        return clone

    def architecture(self) -> dict:
        return {
            "layers": [layer.spec() for layer in self.layers],
            "head": self.head.spec(),
            "input_sides": list(self.input_sides),
        }

    # --- forward / backward ------------------------------------------------------

    def _as_batch(self, tiles) -> np.ndarray:
        if isinstance(tiles, RasterTile):
            tiles = [tiles]
        if isinstance(tiles, np.ndarray):
            x = tiles.astype(np.float64, copy=False)
            if x.ndim == 3:
                x = x[None]
        else:
            x = np.stack([np.asarray(t.pixels, dtype=np.float64) for t in tiles])
        if x.ndim != 4 or x.shape[-1] != 3:
            raise DataError(f"expected N×H×W×3 input, got {x.shape}")
        h, w = x.shape[1:3]
        if h != w or h not in self.input_sides:
            raise DataError(f"unsupported input size {h}×{w}; accepted sides: {self.input_sides}")
        return x

    def trace(self, x: np.ndarray) -> Trace:
        acts, caches = [x], []
        for layer in self.layers:
            x, cache = layer.forward(x)
            acts.append(x)
            caches.append(cache)
        return Trace(acts, caches)

    def forward_batch(self, tiles) -> tuple[np.ndarray, np.ndarray]:
        """(N×D features, N outputs) for a batch of tiles or an N×H×W×3 array."""
        tr = self.trace(self._as_batch(tiles))
        feats = tr.activations[-1]
        out, _ = self.head.forward(feats)
        return feats, out

    def forward(self, tile: RasterTile) -> tuple[np.ndarray, float]:
        feats, out = self.forward_batch(tile)
        return feats[0], float(out[0])

    def features(self, tiles, batch_size: int = 16) -> np.ndarray:
        """Feature vectors for many tiles, evaluated in micro-batches."""
        x = self._as_batch(tiles) if not isinstance(tiles, list) else None
        if x is not None:
            chunks = [x[i:i + batch_size] for i in range(0, len(x), batch_size)]
        else:
            chunks = [tiles[i:i + batch_size] for i in range(0, len(tiles), batch_size)]
        return np.concatenate([self.forward_batch(c)[0] for c in chunks], axis=0)

    def _seed_gradient(self, feats: np.ndarray, unit: Unit) -> tuple[np.ndarray, dict]:
        """d(selected scalar)/d(features), plus head grads when the unit is the output."""
        if unit == OUTPUT:
            dfeat, hgrads = self.head.backward(np.ones(feats.shape[0]), feats)
            return dfeat, hgrads
        if isinstance(unit, (int, np.integer)) and 0 <= unit < feats.shape[1]:
            dfeat = np.zeros_like(feats)
            dfeat[:, int(unit)] = 1.0
            return dfeat, {}
        raise DataError(f"invalid unit {unit!r}: use 'output' or a feature index below {feats.shape[1]}")

    def backward_from(self, tr: Trace, dfeat: np.ndarray, stop: int = 0, guided: bool = False):
        """Propagate d/d(features) back to activation index `stop`; returns (grad, param grads)."""
        grads: dict[str, np.ndarray] = {}
        d = dfeat
        for idx in range(len(self.layers) - 1, stop - 1, -1):
            layer = self.layers[idx]
            d, g = layer.backward(d, tr.caches[idx], guided=guided)
            for pname, val in g.items():
                grads[f"{layer.name}.{pname}"] = val
        return d, grads

    def input_gradient(self, tile: RasterTile, unit: Unit = OUTPUT, guided: bool = False) -> np.ndarray:
        """Exact d(unit)/d(pixels), H×W×3."""
        tr = self.trace(self._as_batch(tile))
        dfeat, _ = self._seed_gradient(tr.activations[-1], unit)
        d, _ = self.backward_from(tr, dfeat, stop=0, guided=guided)
        return d[0]

    def layer_activations_and_gradients(
        self, tile: RasterTile, layer_id: str | int, unit: Unit = OUTPUT
    ) -> tuple[np.ndarray, np.ndarray]:
        """Activations of `layer_id` and d(unit)/d(those activations), spatially indexed."""
        idx = self.layer_index(layer_id)
        tr = self.trace(self._as_batch(tile))
        dfeat, _ = self._seed_gradient(tr.activations[-1], unit)
        d, _ = self.backward_from(tr, dfeat, stop=idx + 1)
        return tr.activations[idx + 1][0], d[0]

    def loss_and_gradients(self, x: np.ndarray, y: np.ndarray, train_backbone: bool = True):
        """Mean squared error on a batch and its parameter gradients."""
        tr = self.trace(x)
        feats = tr.activations[-1]
        pred, _ = self.head.forward(feats)
        resid = pred - y
        loss = float(np.mean(resid**2))
        dpred = 2.0 * resid / len(y)
        dfeat, hgrads = self.head.backward(dpred, feats)
        grads = {f"{self.head.name}.{k}": v for k, v in hgrads.items()}
        if train_backbone:
            _, bgrads = self.backward_from(tr, dfeat, stop=0)
            grads.update(bgrads)
        return loss, grads


# --- construction from specs / checkpoints -------------------------------------


def _layer_from_spec(spec: dict, params: dict[str, np.ndarray]) -> Layer:
    kind, name = spec["type"], spec["name"]
    if kind == "conv":
        return Conv2d(params[f"{name}.weight"], params[f"{name}.bias"], spec["stride"], spec["padding"], name)
    if kind == "relu":
        return ReLU(name)
    if kind == "avgpool":
        return AvgPool2d(spec["size"], name)
    if kind == "gap":
        return GlobalAvgPool(name)
    raise DataError(f"unknown layer type {kind!r} in architecture")


def load_state(architecture: dict, params: dict[str, np.ndarray]) -> ConvNet:
    layers = [_layer_from_spec(s, params) for s in architecture["layers"]]
    hname = architecture["head"]["name"]
    head = Linear(params[f"{hname}.weight"], params[f"{hname}.bias"], hname)
    return ConvNet(layers, head, architecture.get("input_sides", DEFAULT_INPUT_SIDES))


def save_checkpoint(net: ConvNet, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest, offset, blobs = [], 0, []
    for name, arr in net.parameters().items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(data.size)})
        offset += data.size
        blobs.append(data.tobytes())
    header = json.dumps({"architecture": net.architecture(), "params": manifest}, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> ConvNet:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a wealth-xai checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt checkpoint header in {path}: {e}") from e
    payload = np.frombuffer(raw[12 + hlen:], dtype="<f4")
    params = {}
    for entry in header["params"]:
        start, count = entry["offset"], entry["count"]
        if start + count > payload.size or int(np.prod(entry["shape"])) != count:
            raise DataError(f"checkpoint manifest does not match payload for {entry['name']}")
        params[entry["name"]] = payload[start:start + count].astype(np.float64).reshape(entry["shape"])
    try:
        return load_state(header["architecture"], params)
    except KeyError as e:
        raise DataError(f"checkpoint {path} lacks parameter {e}") from e
