"""Dense-tensor neural layers with explicit forward/backward passes.

Tensors are plain ``numpy.ndarray`` objects (float64 unless a layer was built
with ``dtype=np.float32``). Every layer's ``forward`` returns ``(output, ctx)``
and ``backward`` consumes that ``ctx``; there is no autodiff graph.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _backend


class ShapeError(ValueError):
    pass


class StaleContextError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")


def same_padding(size, kernel, stride):
    """Output extent and (before, after) padding for 'same' convolution."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _resolve_padding(padding, in_hw, kernel, stride):
    if padding == "same":
        _, t, b = same_padding(in_hw[0], kernel[0], stride)
        _, l, r = same_padding(in_hw[1], kernel[1], stride)
        return (t, b, l, r)
    if isinstance(padding, int):
        return (padding,) * 4
    pad = tuple(int(p) for p in padding)
    if len(pad) == 2:
        return (pad[0], pad[0], pad[1], pad[1])
    if len(pad) != 4:
        raise ValueError(f"bad padding spec {padding!r}")
    return pad


def _conv_out(size, kernel, stride, before, after):
    return (size + before + after - kernel) // stride + 1


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float64):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class Context:
    owner: int
    version: int
    in_shape: tuple
    out_shape: tuple
    saved: dict = field(default_factory=dict)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.version = 0

    def hyper(self):
        return {}

    def output_shape(self, in_shape):
        """Per-sample output shape for a per-sample input shape."""
        raise NotImplementedError

    def forward(self, x):
        x = np.asarray(x)
        _check_finite(x, f"{self.kind} forward input")
        y, saved = self._forward(x)
        _check_finite(y, f"{self.kind} forward output")
        return y, Context(id(self), self.version, x.shape, y.shape, saved)

    def backward(self, grad_out, ctx):
        if ctx is None:
            raise StaleContextError(f"{self.kind}: backward called without a forward context")
        if ctx.owner != id(self) or ctx.version != self.version:
            raise StaleContextError(
                f"{self.kind}: context is stale (made by another layer or before a parameter update)"
            )
        grad_out = np.asarray(grad_out)
        if grad_out.shape != ctx.out_shape:
            raise ShapeError(
                f"{self.kind} backward: grad_out shape {grad_out.shape} != forward output {ctx.out_shape}"
            )
        grad_in, grads = self._backward(grad_out, ctx)
        _check_finite(grad_in, f"{self.kind} backward")
        return grad_in, grads

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, grad_out, ctx):
        raise NotImplementedError

    def _shape_error(self, expected, got):
        return ShapeError(f"{self.kind} layer expects input shape {expected}, got {got}")


class Conv2D(Layer):
    """Strided 2-D convolution, NCHW layout, weight (out, in, kh, kw)."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng=None, dtype=np.float64):
        super().__init__()
        k = (kernel_size, kernel_size) if isinstance(kernel_size, int) else tuple(kernel_size)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = k
        self.stride = int(stride)
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        rf = k[0] * k[1]
        self.params = {
            "weight": glorot_uniform(rng, (out_channels, in_channels) + k,
                                     in_channels * rf, out_channels * rf, dtype),
            "bias": np.zeros(out_channels, dtype=dtype),
        }

    def hyper(self):
        pad = self.padding if isinstance(self.padding, str) else list(_resolve_padding(self.padding, (0, 0), self.kernel_size, 1))
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": list(self.kernel_size), "stride": self.stride, "padding": pad}

    def _geometry(self, hw):
        pad = _resolve_padding(self.padding, hw, self.kernel_size, self.stride)
        ho = _conv_out(hw[0], self.kernel_size[0], self.stride, pad[0], pad[1])
        wo = _conv_out(hw[1], self.kernel_size[1], self.stride, pad[2], pad[3])
        return pad, ho, wo

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise self._shape_error(f"(N, {self.in_channels}, H, W)", tuple(in_shape))
        _, ho, wo = self._geometry(in_shape[1:])
        if ho < 1 or wo < 1:
            raise self._shape_error("a larger spatial extent", tuple(in_shape))
        return (self.out_channels, ho, wo)

    def _forward(self, x):
        if x.ndim != 4:
            raise self._shape_error(f"(N, {self.in_channels}, H, W)", x.shape)
        self.output_shape(x.shape[1:])
        pad, ho, wo = self._geometry(x.shape[2:])
        s = self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[1]), (pad[2], pad[3])))
        win = sliding_window_view(xp, self.kernel_size, axis=(2, 3))
        win = win[:, :, : (ho - 1) * s + 1: s, : (wo - 1) * s + 1: s]
        w = self.params["weight"]
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        y = y + self.params["bias"][None, :, None, None]
        return np.ascontiguousarray(y), {"win": win, "pad": pad, "padded": xp.shape}

    def _backward(self, grad_out, ctx):
        win, pad = ctx.saved["win"], ctx.saved["pad"]
        w = self.params["weight"]
        gw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = grad_out.sum(axis=(0, 2, 3))
        cols = np.tensordot(grad_out, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        cols = np.ascontiguousarray(cols.transpose(0, 3, 1, 2, 4, 5))
        gxp = _backend.col2im(cols, ctx.saved["padded"], self.kernel_size, self.stride)
        h, wd = ctx.in_shape[2:]
        gx = gxp[:, :, pad[0]: pad[0] + h, pad[2]: pad[2] + wd]
        return np.ascontiguousarray(gx), {"weight": gw, "bias": gb}


class Deconv2D(Layer):
    """Transposed convolution: the exact adjoint of :class:`Conv2D`.

    Weight is stored as (out, in, kh, kw). With ``weight = conv.weight.transpose(1, 0, 2, 3)``
    and matching stride/padding/output_size, ``<conv(x), y> == <x, deconv(y)>``.
    ``output_size`` fixes the spatial extent, which stride > 1 leaves ambiguous.
    """

    kind = "deconv"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 output_size=None, rng=None, dtype=np.float64):
        super().__init__()
        k = (kernel_size, kernel_size) if isinstance(kernel_size, int) else tuple(kernel_size)
        if output_size is None:
            raise ValueError("deconv needs an explicit output_size")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = k
        self.stride = int(stride)
        self.padding = padding
        self.output_size = tuple(int(v) for v in output_size)
        rng = rng if rng is not None else np.random.default_rng(0)
        rf = k[0] * k[1]
        self.params = {
            "weight": glorot_uniform(rng, (out_channels, in_channels) + k,
                                     in_channels * rf, out_channels * rf, dtype),
            "bias": np.zeros(out_channels, dtype=dtype),
        }

    def hyper(self):
        pad = self.padding if isinstance(self.padding, str) else list(_resolve_padding(self.padding, (0, 0), self.kernel_size, 1))
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": list(self.kernel_size), "stride": self.stride,
                "padding": pad, "output_size": list(self.output_size)}

    def _geometry(self):
        pad = _resolve_padding(self.padding, self.output_size, self.kernel_size, self.stride)
        hi = _conv_out(self.output_size[0], self.kernel_size[0], self.stride, pad[0], pad[1])
        wi = _conv_out(self.output_size[1], self.kernel_size[1], self.stride, pad[2], pad[3])
        return pad, hi, wi

    def output_shape(self, in_shape):
        _, hi, wi = self._geometry()
        if tuple(in_shape) != (self.in_channels, hi, wi):
            raise self._shape_error(f"(N, {self.in_channels}, {hi}, {wi})", tuple(in_shape))
        return (self.out_channels,) + self.output_size

    def _forward(self, x):
        if x.ndim != 4:
            raise self._shape_error(f"(N, {self.in_channels}, H, W)", x.shape)
        self.output_shape(x.shape[1:])
        pad, _, _ = self._geometry()
        h, w = self.output_size
        padded = (x.shape[0], self.out_channels, h + pad[0] + pad[1], w + pad[2] + pad[3])
        cols = np.tensordot(x, self.params["weight"], axes=([1], [1]))  # N, Hi, Wi, C, kh, kw
        cols = np.ascontiguousarray(cols.transpose(0, 3, 1, 2, 4, 5))
        yp = _backend.col2im(cols, padded, self.kernel_size, self.stride)
        y = yp[:, :, pad[0]: pad[0] + h, pad[2]: pad[2] + w]
        y = y + self.params["bias"][None, :, None, None]
        return np.ascontiguousarray(y), {"x": x, "pad": pad}

    def _backward(self, grad_out, ctx):
        x, pad = ctx.saved["x"], ctx.saved["pad"]
        hi, wi = x.shape[2:]
        s = self.stride
        gp = np.pad(grad_out, ((0, 0), (0, 0), (pad[0], pad[1]), (pad[2], pad[3])))
        win = sliding_window_view(gp, self.kernel_size, axis=(2, 3))
        win = win[:, :, : (hi - 1) * s + 1: s, : (wi - 1) * s + 1: s]
        w = self.params["weight"]
        gx = np.tensordot(win, w, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(win, x, axes=([0, 2, 3], [0, 2, 3])).transpose(0, 3, 1, 2)
        gb = grad_out.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx), {"weight": np.ascontiguousarray(gw), "bias": gb}


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float64):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "weight": glorot_uniform(rng, (out_features, in_features), in_features, out_features, dtype),
            "bias": np.zeros(out_features, dtype=dtype),
        }

    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise self._shape_error(f"(N, {self.in_features})", tuple(in_shape))
        return (self.out_features,)

    def _forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise self._shape_error(f"(N, {self.in_features})", x.shape)
        return x @ self.params["weight"].T + self.params["bias"], {"x": x}

    def _backward(self, grad_out, ctx):
        x = ctx.saved["x"]
        w = self.params["weight"]
        return grad_out @ w, {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}


class ReLU(Layer):
    kind = "relu-activation"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def _forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False), {"mask": mask}

    def _backward(self, grad_out, ctx):
        return np.where(ctx.saved["mask"], grad_out, 0.0).astype(grad_out.dtype, copy=False), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def _forward(self, x):
        return x.reshape(x.shape[0], -1), {}

    def _backward(self, grad_out, ctx):
        return grad_out.reshape(ctx.in_shape), {}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, target_shape):
        super().__init__()
        self.target_shape = tuple(int(v) for v in target_shape)

    def hyper(self):
        return {"target_shape": list(self.target_shape)}

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.target_shape)):
            raise self._shape_error(f"{int(np.prod(self.target_shape))} elements per sample", tuple(in_shape))
        return self.target_shape

    def _forward(self, x):
        self.output_shape(x.shape[1:])
        return x.reshape((x.shape[0],) + self.target_shape), {}

    def _backward(self, grad_out, ctx):
        return grad_out.reshape(ctx.in_shape), {}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, Deconv2D, Dense, ReLU, Flatten, Reshape)}


class Sequential:
    """Ordered layer stack; backward returns grads aligned with ``parameters()``."""

    def __init__(self, layers):
        self.layers = list(layers)

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def parameters(self):
        return [layer.params[name] for layer in self.layers for name in sorted(layer.params)]

    def forward(self, x):
        ctxs = []
        for layer in self.layers:
            x, ctx = layer.forward(x)
            ctxs.append(ctx)
        return x, ctxs

    def predict(self, x, batch_size=1024):
        x = np.asarray(x)
        if x.shape[0] <= batch_size:
            return self.forward(x)[0]
        return np.concatenate([self.forward(x[i:i + batch_size])[0]
                               for i in range(0, x.shape[0], batch_size)])

    def backward(self, grad, ctxs):
        if len(ctxs) != len(self.layers):
            raise StaleContextError("context list does not match the layer stack")
        per_layer = []
        for layer, ctx in zip(reversed(self.layers), reversed(ctxs)):
            grad, g = layer.backward(grad, ctx)
            per_layer.append(g)
        per_layer.reverse()
        grads = [g[name] for layer, g in zip(self.layers, per_layer) for name in sorted(layer.params)]
        return grad, grads

    def bump_version(self):
        for layer in self.layers:
            layer.version += 1


def mse_loss(x, x_rec):
    """Squared error summed over features, averaged over the batch.

    Returns ``(loss, grad)`` with ``grad`` taken w.r.t. ``x_rec``.
    """
    x = np.asarray(x)
    x_rec = np.asarray(x_rec)
    if x.shape != x_rec.shape:
        raise ShapeError(f"mse_loss: shapes differ, {x.shape} vs {x_rec.shape}")
    n = x.shape[0] if x.ndim > 1 else 1
    diff = x_rec - x
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


class Optimizer:
    kind = "optimizer"

    def __init__(self, lr):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)
        self.t = 0

    def step(self, params, grads):
        """Update ``params`` in place."""
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"parameter shape {p.shape} vs gradient shape {g.shape}")
            _check_finite(g, "gradient")
        self.t += 1
        self._update(params, grads)

    def _update(self, params, grads):
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = None
        self.v = None

    def _update(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if m.shape != p.shape:
                raise ShapeError("Adam moment shape no longer matches its parameter")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind, lr, **kwargs):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


# -- checkpoints ---------------------------------------------------------------

def _layer_from_manifest(entry, dtype):
    kind = entry["kind"]
    hyper = dict(entry.get("hyper", {}))
    if kind == "conv":
        return Conv2D(hyper["in_channels"], hyper["out_channels"], tuple(hyper["kernel_size"]),
                      hyper["stride"], hyper["padding"], dtype=dtype)
    if kind == "deconv":
        return Deconv2D(hyper["in_channels"], hyper["out_channels"], tuple(hyper["kernel_size"]),
                        hyper["stride"], hyper["padding"], tuple(hyper["output_size"]), dtype=dtype)
    if kind == "dense":
        return Dense(hyper["in_features"], hyper["out_features"], dtype=dtype)
    if kind == "reshape":
        return Reshape(hyper["target_shape"])
    if kind in LAYER_KINDS:
        return LAYER_KINDS[kind]()
    raise ValueError(f"unknown layer kind {kind!r} in checkpoint")


def save_checkpoint(path, stacks, extra=None):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian params).

    ``stacks`` maps a stack name to a :class:`Sequential`.
    """
    path = Path(path)
    manifest = {"format": "caemle-checkpoint", "version": 1, "byteorder": "little",
                "stacks": {}, "extra": extra or {}}
    dtype = None
    blobs = []
    for name, seq in stacks.items():
        entries = []
        for layer in seq:
            pinfo = []
            for pname in sorted(layer.params):
                arr = layer.params[pname]
                dtype = dtype or arr.dtype.name
                pinfo.append({"name": pname, "shape": list(arr.shape)})
                blobs.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
            entries.append({"kind": layer.kind, "hyper": layer.hyper(), "params": pinfo})
        manifest["stacks"][name] = entries
    manifest["dtype"] = dtype or "float64"
    json_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    manifest["blob"] = bin_path.name
    bin_path.write_bytes(b"".join(blobs))
    json_path.write_text(json.dumps(manifest, indent=2))
    return json_path, bin_path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(stacks, extra)``."""
    json_path = Path(path).with_suffix(".json")
    manifest = json.loads(json_path.read_text())
    if manifest.get("format") != "caemle-checkpoint":
        raise ValueError(f"{json_path} is not a caemle checkpoint manifest")
    dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
    blob = (json_path.parent / manifest["blob"]).read_bytes()
    offset = 0
    stacks = {}
    for name, entries in manifest["stacks"].items():
        layers = []
        for entry in entries:
            layer = _layer_from_manifest(entry, np.dtype(manifest["dtype"]))
            for pinfo in entry["params"]:
                shape = tuple(pinfo["shape"])
                count = int(np.prod(shape))
                nbytes = count * dtype.itemsize
                if offset + nbytes > len(blob):
                    raise ValueError("checkpoint blob is truncated")
                arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
                layer.params[pinfo["name"]] = arr.astype(np.dtype(manifest["dtype"]))
                offset += nbytes
            layers.append(layer)
        stacks[name] = Sequential(layers)
    if offset != len(blob):
        raise ValueError("checkpoint blob has trailing bytes")
    return stacks, manifest.get("extra", {})
