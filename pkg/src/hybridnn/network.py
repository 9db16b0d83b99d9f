"""Layer chain, loss heads, backpropagation and checkpoints.

Activations are batched: a layer sees arrays whose first axis indexes the
samples of a minibatch. Gradients of complex quantities follow the Wirtinger
convention: the stored gradient of a complex parameter ``w`` is
``dL/d(conj w) = (dL/d re(w) + 1j * dL/d im(w)) / 2`` and the SGD update is
``-lr * dL/d(conj w)``. Real parameters carry the ordinary gradient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctensor import DimensionError, embed_centered, extract_centered, fft2, ifft2, is_power_of_two, pad_to


class ShapeError(DimensionError):
    """A layer received an activation it cannot consume."""


class CompositionError(ValueError):
    """Shape mismatch while running the layer chain; names the layer index."""


class StateError(RuntimeError):
    """Backward was requested without a preceding forward."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not fit the network."""


def modulus_subgradient(z):
    """Unit-modulus direction ``z/|z|``; 0 at ``z == 0``.

    For real input this is ``sign(z)``, the derivative of ``|z|``.
    """
    z = np.asarray(z)
    mag = np.abs(z)
    safe = np.where(mag > 0, mag, 1.0)
    return np.where(mag > 0, z / safe, 0)


def sgd_step(param: np.ndarray, update: np.ndarray) -> np.ndarray:
    """Return ``param + update``; ``update`` already contains ``-lr``."""
    param = np.asarray(param)
    update = np.asarray(update)
    if param.shape != update.shape:
        raise ShapeError(f"update shape {update.shape} != parameter shape {param.shape}")
    return param + update


def init_uniform(rng: np.random.Generator, shape, fan_in: int, complex_: bool,
                 gain: float = 1.0) -> np.ndarray:
    """Re (and im) parts uniform in ``+-gain * sqrt(1 / fan_in)``."""
    bound = gain * np.sqrt(1.0 / fan_in)
    w = rng.uniform(-bound, bound, size=shape)
    if complex_:
        w = w + 1j * rng.uniform(-bound, bound, size=shape)
    return w


class Layer:
    """Base class. Subclasses fill ``params`` and implement the two passes."""

    group = "main"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    @property
    def kind(self) -> str:
        return type(self).__name__

    def check_input(self, x: np.ndarray) -> None:
        pass

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, delta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{self.kind}.backward called before forward")
        return self._cache

    def clear(self) -> None:
        self._cache = None


def _require_real(layer: Layer, x: np.ndarray) -> None:
    if np.iscomplexobj(x):
        raise ShapeError(f"{layer.kind} expects real input, got {x.dtype}")


class DenseLayer(Layer):
    """Affine map ``y = W x + b`` on flat features, shape (N, n_in) -> (N, n_out)."""

    def __init__(self, n_in: int, n_out: int, complex_: bool = False,
                 rng: np.random.Generator | None = None, init_gain: float = 1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.complex = n_in, n_out, complex_
        dtype = np.complex128 if complex_ else np.float64
        self.params["W"] = init_uniform(rng, (n_out, n_in), n_in, complex_, init_gain).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)

    def check_input(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"DenseLayer expects (N, {self.n_in}), got {x.shape}")
        if not self.complex:
            _require_real(self, x)

    def forward(self, x):
        self._cache = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, delta):
        x = self._cached()
        self.grads["W"] = delta.T @ np.conj(x)
        self.grads["b"] = delta.sum(axis=0)
        return delta @ np.conj(self.params["W"])


class ConvLayer(Layer):
    """Multi-channel 2-D cross-correlation layer, (N, C, H, W) -> (N, K, H', W').

    ``padding="valid"`` gives ``H' = H - kh + 1``. ``padding="same"`` zero-pads
    the input by ``(kh - 1) // 2`` before and ``kh // 2`` after each axis so
    ``H' = H``; the padded input is then processed exactly as in the valid case.
    """

    def __init__(self, in_ch: int, out_ch: int, kh: int, kw: int | None = None,
                 padding: str = "valid", complex_: bool = False,
                 rng: np.random.Generator | None = None, init_gain: float = 1.0):
        super().__init__()
        if padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {padding!r}")
        kw = kh if kw is None else kw
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kh, self.kw = in_ch, out_ch, kh, kw
        self.padding, self.complex = padding, complex_
        dtype = np.complex128 if complex_ else np.float64
        fan_in = in_ch * kh * kw
        self.params["W"] = init_uniform(rng, (out_ch, in_ch, kh, kw), fan_in, complex_, init_gain).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)

    def _pads(self):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        return ((self.kh - 1) // 2, self.kh // 2), ((self.kw - 1) // 2, self.kw // 2)

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"ConvLayer expects (N, {self.in_ch}, H, W), got {x.shape}")
        if self.padding == "valid" and (x.shape[2] < self.kh or x.shape[3] < self.kw):
            raise ShapeError(f"ConvLayer kernel {self.kh}x{self.kw} larger than input {x.shape[2:]}")
        if not self.complex:
            _require_real(self, x)

    def forward(self, x):
        ph, pw = self._pads()
        xp = np.pad(x, ((0, 0), (0, 0), ph, pw)) if self.padding == "same" else x
        P, Q = xp.shape[-2:]
        use_complex = self.complex or np.iscomplexobj(x)
        fwd, inv = _fft_pair(use_complex, (P, Q))
        xf = fwd(xp)
        w = self.params["W"]
        # spectrum of the index-reversed kernel turns the product into a correlation
        wf = np.conj(fwd(pad_to(np.conj(w), (P, Q)))) if use_complex else np.conj(fwd(pad_to(w, (P, Q))))
        yf = np.einsum("ncpq,kcpq->nkpq", xf, wf, optimize=True)
        y = inv(yf)[..., : P - self.kh + 1, : Q - self.kw + 1]
        self._cache = (xp, xf, x.shape)
        return y + self.params["b"][None, :, None, None]

    def backward(self, delta):
        xp, xf, in_shape = self._cached()
        P, Q = xp.shape[-2:]
        use_complex = self.complex or np.iscomplexobj(delta) or np.iscomplexobj(xp)
        fwd, inv = _fft_pair(use_complex, (P, Q))
        df = fwd(pad_to(delta, (P, Q)))
        # dL/dW[k,c,u] = sum_n sum_i delta[n,k,i] * conj(xp[n,c,i+u])
        if use_complex:
            rev = np.conj(fwd(pad_to(np.conj(delta), (P, Q))))
            gw_f = np.einsum("nkpq,ncpq->kcpq", rev, fwd(np.conj(xp)), optimize=True)
        else:
            gw_f = np.einsum("nkpq,ncpq->kcpq", np.conj(df), xf, optimize=True)
        gw = inv(gw_f)[..., : self.kh, : self.kw]
        self.grads["W"] = gw if self.complex else gw.real
        self.grads["b"] = delta.sum(axis=(0, 2, 3))
        # dL/dx[n,c,j] = sum_k (delta[n,k] * conj(W[k,c]))[j]; the linear convolution has size P x Q
        wf = fwd(pad_to(np.conj(self.params["W"]), (P, Q)))
        gx = inv(np.einsum("nkpq,kcpq->ncpq", df, wf, optimize=True))
        if self.padding == "same":
            (pt, _), (pl, _) = self._pads()
            gx = gx[..., pt: pt + in_shape[2], pl: pl + in_shape[3]]
        return gx


def _fft_pair(complex_: bool, shape):
    if complex_:
        return (lambda a: np.fft.fft2(a, axes=(-2, -1)),
                lambda a: np.fft.ifft2(a, axes=(-2, -1)))
    return (lambda a: np.fft.rfft2(a, axes=(-2, -1)),
            lambda a: np.fft.irfft2(a, s=shape, axes=(-2, -1)))


def as_image_batch(x: np.ndarray) -> np.ndarray:
    """Coerce (H, W), (N, H, W) or (N, 1, H, W) to (N, 1, H, W)."""
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    return x


def check_raw_input(layer: Layer, x: np.ndarray, min_size: int) -> None:
    if x.ndim not in (2, 3, 4) or (x.ndim == 4 and x.shape[1] != 1):
        raise ShapeError(f"{layer.kind} expects (N, H, W) raw data, got {x.shape}")
    rows, cols = x.shape[-2:]
    if not (is_power_of_two(rows) and is_power_of_two(cols)):
        raise ShapeError(f"{layer.kind} needs power-of-two input, got {rows}x{cols}")
    if rows < min_size or cols < min_size:
        raise ShapeError(f"{layer.kind} filter {min_size}x{min_size} larger than input {rows}x{cols}")


class CircConvLayer(Layer):
    """Single-channel complex 'same'-size circular convolution with a free kernel.

    Same geometry as the matched-filter layer (centred kernel, periodic
    boundary) but every kernel entry is a trainable complex weight.
    """

    group = "sp"

    def __init__(self, size: int, rng: np.random.Generator | None = None, init_gain: float = 1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.size = size
        self.params["W"] = init_uniform(rng, (size, size), size * size, True, init_gain).astype(np.complex128)
        self.params["b"] = np.zeros(1, dtype=np.complex128)

    def check_input(self, x):
        check_raw_input(self, x, self.size)

    def forward(self, x):
        in_shape = np.shape(x)
        x = as_image_batch(np.asarray(x, dtype=np.complex128))
        sf = fft2(x)
        kf = fft2(embed_centered(self.params["W"], x.shape[-2:]))
        self._cache = (in_shape, sf, kf)
        return ifft2(kf * sf) + self.params["b"][0]

    def backward(self, delta):
        in_shape, sf, kf = self._cached()
        gf = fft2(as_image_batch(delta))
        full = ifft2(gf * np.conj(sf)).sum(axis=(0, 1))
        self.grads["W"] = extract_centered(full, self.size, self.size)
        self.grads["b"] = np.array([delta.sum()])
        return ifft2(np.conj(kf) * gf).reshape(in_shape)


class ModulusActivation(Layer):
    """Elementwise ``|x|``; turns complex activations into real ones."""

    def forward(self, x):
        self._cache = x
        return np.abs(x)

    def backward(self, delta):
        x = self._cached()
        direction = modulus_subgradient(x)
        if np.iscomplexobj(x):
            # d|z|/d(conj z) = z / (2|z|)
            return delta * direction / 2
        return delta * direction


class Scale(Layer):
    """Multiplication by a fixed real gain.

    The gain is kept in ``params`` so it travels with checkpoints, but the
    layer never reports a gradient for it, so SGD leaves it unchanged.
    """

    def __init__(self, gain: float = 1.0):
        super().__init__()
        self.params["gain"] = np.array([float(gain)])

    @property
    def gain(self) -> float:
        return float(self.params["gain"][0])

    def forward(self, x):
        self._cache = True
        return x * self.gain

    def backward(self, delta):
        self._cached()
        return delta * self.gain


class ReLU(Layer):
    def check_input(self, x):
        _require_real(self, x)

    def forward(self, x):
        self._cache = x > 0
        # np.maximum keeps NaN, so a corrupt input still surfaces as a NaN loss
        return np.maximum(x, 0.0)

    def backward(self, delta):
        return np.where(self._cached(), delta, 0.0)


class AvgPool(Layer):
    """Non-overlapping ``p x p`` mean pooling on (N, C, H, W)."""

    def __init__(self, p: int):
        super().__init__()
        if p < 1:
            raise ValueError("pool factor must be positive")
        self.p = p

    def check_input(self, x):
        if x.ndim != 4 or x.shape[2] % self.p or x.shape[3] % self.p:
            raise ShapeError(f"AvgPool({self.p}) needs (N, C, H, W) divisible by {self.p}, got {x.shape}")

    def forward(self, x):
        n, c, h, w = x.shape
        p = self.p
        self._cache = x.shape
        return x.reshape(n, c, h // p, p, w // p, p).mean(axis=(3, 5))

    def backward(self, delta):
        self._cached()
        p = self.p
        return np.repeat(np.repeat(delta, p, axis=2), p, axis=3) / (p * p)


class MaxPool(Layer):
    """Non-overlapping ``p x p`` max pooling on (N, C, H, W).

    The gradient goes to the first maximal element of each window.
    """

    def __init__(self, p: int):
        super().__init__()
        if p < 1:
            raise ValueError("pool factor must be positive")
        self.p = p

    def check_input(self, x):
        if x.ndim != 4 or x.shape[2] % self.p or x.shape[3] % self.p:
            raise ShapeError(f"MaxPool({self.p}) needs (N, C, H, W) divisible by {self.p}, got {x.shape}")
        _require_real(self, x)

    def _windows(self, x):
        n, c, h, w = x.shape
        p = self.p
        return (x.reshape(n, c, h // p, p, w // p, p)
                .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // p, w // p, p * p))

    def forward(self, x):
        win = self._windows(x)
        arg = np.argmax(win, axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, delta):
        shape, arg = self._cached()
        n, c, h, w = shape
        p = self.p
        win = np.zeros((n, c, h // p, w // p, p * p), dtype=delta.dtype)
        np.put_along_axis(win, arg[..., None], delta[..., None], axis=-1)
        return (win.reshape(n, c, h // p, w // p, p, p)
                .transpose(0, 1, 2, 4, 3, 5).reshape(shape))


class Flatten(Layer):
    def check_input(self, x):
        if x.ndim < 2:
            raise ShapeError(f"Flatten expects a batch, got {x.shape}")

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, delta):
        return delta.reshape(self._cached())


class SoftmaxCrossEntropy:
    """Softmax over class scores with mean cross-entropy loss."""

    def __init__(self, n_classes: int = 3):
        self.n_classes = n_classes
        self.probs: np.ndarray | None = None

    def forward(self, z: np.ndarray) -> np.ndarray:
        if np.iscomplexobj(z):
            raise ShapeError("softmax head expects real scores")
        if z.ndim != 2 or z.shape[1] != self.n_classes:
            raise ShapeError(f"softmax head expects (N, {self.n_classes}), got {z.shape}")
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self.probs = e / e.sum(axis=1, keepdims=True)
        self._log_probs = shifted - np.log(e.sum(axis=1, keepdims=True))
        return self.probs

    def loss(self, labels) -> float:
        labels = np.asarray(labels)
        return float(-self._log_probs[np.arange(len(labels)), labels].mean())

    def backward(self, labels) -> np.ndarray:
        if self.probs is None:
            raise StateError("loss head backward called before forward")
        labels = np.asarray(labels)
        n = len(labels)
        delta = self.probs.copy()
        delta[np.arange(n), labels] -= 1.0
        return delta / n


class SquaredError:
    """``0.5 * mean_n ||y_n - t_n||^2`` on real outputs."""

    def __init__(self):
        self.out: np.ndarray | None = None

    def forward(self, z):
        self.out = z
        return z

    def loss(self, targets) -> float:
        r = self.out - np.asarray(targets)
        return float(0.5 * np.sum(r * r) / len(r))

    def backward(self, targets):
        if self.out is None:
            raise StateError("loss head backward called before forward")
        return (self.out - np.asarray(targets)) / len(self.out)


@dataclass
class Network:
    """Strict chain of layers followed by one loss head.

    ``lr`` maps a layer's ``group`` name to its learning rate; unknown groups
    fall back to ``lr["main"]``.
    """

    layers: list
    head: object = field(default_factory=SoftmaxCrossEntropy)
    lr: dict = field(default_factory=lambda: {"main": 0.01})

    def forward(self, x0) -> np.ndarray:
        x = np.asarray(x0)
        for i, layer in enumerate(self.layers):
            try:
                layer.check_input(x)
            except DimensionError as exc:
                raise CompositionError(f"layer {i} ({layer.kind}): {exc}") from exc
            x = layer.forward(x)
        self._out = x
        if self.head is None:
            return x
        try:
            return self.head.forward(x)
        except DimensionError as exc:
            raise CompositionError(f"loss head after layer {len(self.layers) - 1}: {exc}") from exc

    def loss(self, target) -> float:
        return self.head.loss(target)

    def gradients(self, target=None, delta=None) -> list[dict]:
        """Backpropagate and return per-layer gradient dicts.

        ``delta`` overrides the loss-head error at the network output.
        """
        if delta is None:
            delta = self.head.backward(target)
        for layer in reversed(self.layers):
            delta = layer.backward(delta)
        self.input_delta = delta
        return [dict(layer.grads) for layer in self.layers]

    def backward(self, target=None, delta=None) -> list[dict]:
        """Per-layer updates ``-lr * gradient``."""
        grads = self.gradients(target, delta)
        updates = []
        for layer, g in zip(self.layers, grads):
            lr = self.lr.get(layer.group, self.lr["main"])
            updates.append({k: -lr * v for k, v in g.items()})
        return updates

    def apply(self, updates: list[dict]) -> None:
        for layer, upd in zip(self.layers, updates):
            for name, delta in upd.items():
                layer.params[name] = sgd_step(layer.params[name], delta)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield i, name, value


# Checkpoint format "HNN1"
#   magic b"HNN1", u32 layer count
#   descriptor table, per layer: u16 name length, utf-8 layer kind, u32 param count,
#       per param: u16 name length, utf-8 name, u8 is_complex, u8 ndim, ndim x u32 dims
#   parameter blocks in layer order: little-endian float64, complex as re/im pairs

CHECKPOINT_MAGIC = b"HNN1"


def describe(net: Network) -> list[tuple[str, list[tuple[str, bool, tuple[int, ...]]]]]:
    return [(layer.kind, [(name, bool(np.iscomplexobj(v)), tuple(v.shape))
                          for name, v in layer.params.items()])
            for layer in net.layers]


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def checkpoint_bytes(net: Network) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(net.layers))]
    for kind, params in describe(net):
        parts.append(_pack_str(kind))
        parts.append(struct.pack("<I", len(params)))
        for name, is_complex, shape in params:
            parts.append(_pack_str(name))
            parts.append(struct.pack("<BB", is_complex, len(shape)))
            parts.append(struct.pack(f"<{len(shape)}I", *shape))
    for layer in net.layers:
        for value in layer.params.values():
            if np.iscomplexobj(value):
                flat = np.ascontiguousarray(value, dtype="<c16").view("<f8")
            else:
                flat = np.ascontiguousarray(value, dtype="<f8")
            parts.append(flat.tobytes())
    return b"".join(parts)


def save_checkpoint(net: Network, path) -> None:
    """Write atomically: a partial file never replaces an existing one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(net))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte offset {self.pos}")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def read_checkpoint(data: bytes):
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic at byte offset 0")
    (n_layers,) = r.unpack("<I")
    table = []
    for _ in range(n_layers):
        kind = r.string()
        (n_params,) = r.unpack("<I")
        params = []
        for _ in range(n_params):
            name = r.string()
            is_complex, ndim = r.unpack("<BB")
            shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
            params.append((name, bool(is_complex), shape))
        table.append((kind, params))
    values = []
    for _, params in table:
        layer_vals = {}
        for name, is_complex, shape in params:
            count = int(np.prod(shape, dtype=np.int64)) * (2 if is_complex else 1)
            raw = np.frombuffer(r.take(8 * count), dtype="<f8")
            arr = raw.view("<c16") if is_complex else raw
            layer_vals[name] = arr.astype(np.complex128 if is_complex else np.float64).reshape(shape)
        values.append(layer_vals)
    if r.pos != len(data):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")
    return table, values


def load_checkpoint(net: Network, path) -> None:
    """Load parameters into ``net``; the descriptor table must match exactly."""
    table, values = read_checkpoint(Path(path).read_bytes())
    expected = describe(net)
    if table != expected:
        lines = [f"checkpoint {path} does not fit this architecture"]
        for i in range(max(len(table), len(expected))):
            e = expected[i] if i < len(expected) else None
            f = table[i] if i < len(table) else None
            if e != f:
                lines.append(f"  layer {i}: expected {e}, found {f}")
        raise CheckpointError("\n".join(lines))
    for layer, vals in zip(net.layers, values):
        for name, v in vals.items():
            layer.params[name] = v
