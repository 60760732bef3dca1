"""Triplet multi-scale encoder + transposed-convolution decoder.

One shared encoder (VGG-16 blocks 1-4, pools 3 and 4 removed, dropout in
block 4) runs over three pyramid scales; the three 512-channel feature maps
are upsampled to the finest feature grid, depth-concatenated to 1536
channels, and decoded back to a per-pixel foreground probability by five
transposed-convolution blocks.

Encoder blocks 1-3 are frozen (pretrained-feature territory); block 4 and
the whole decoder train.  The first transposed layer of each of blocks 5-8
carries an L2 penalty on its weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .kernels import (
    ConvSpec,
    ShapeError,
    concat_depth,
    concat_depth_backward,
    conv2d_backward,
    conv2d_forward,
    dropout,
    dropout_backward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    pointwise_activation,
    pointwise_activation_backward,
    tconv2d_backward,
    tconv2d_forward,
    upsample_nearest,
    upsample_nearest_backward,
)
from .pyramid import PyramidTriple

DROPOUT_RATE = 0.5
DECODER_L2 = 5e-4


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str              # "conv" or "tconv"
    in_ch: int
    out_ch: int
    kernel: int
    upscale: bool = False  # kernel-5 stride-2 geometry that doubles H and W
    pool_after: bool = False
    dropout_after: bool = False
    frozen: bool = False
    l2: float = 0.0

    def spec(self) -> ConvSpec:
        if self.upscale:
            return ConvSpec.upscale2x(self.kernel, self.in_ch, self.out_ch)
        return ConvSpec.same(self.kernel, self.in_ch, self.out_ch)

    def param_count(self):
        return (self.kernel * self.kernel * self.in_ch + 1) * self.out_ch


ENCODER_DEFS = (
    LayerDef("enc.b1.c1", "conv", 3, 64, 3, frozen=True),
    LayerDef("enc.b1.c2", "conv", 64, 64, 3, frozen=True, pool_after=True),
    LayerDef("enc.b2.c1", "conv", 64, 128, 3, frozen=True),
    LayerDef("enc.b2.c2", "conv", 128, 128, 3, frozen=True, pool_after=True),
    LayerDef("enc.b3.c1", "conv", 128, 256, 3, frozen=True),
    LayerDef("enc.b3.c2", "conv", 256, 256, 3, frozen=True),
    LayerDef("enc.b3.c3", "conv", 256, 256, 3, frozen=True),
    LayerDef("enc.b4.c1", "conv", 256, 512, 3, dropout_after=True),
    LayerDef("enc.b4.c2", "conv", 512, 512, 3, dropout_after=True),
    LayerDef("enc.b4.c3", "conv", 512, 512, 3, dropout_after=True),
)

DECODER_DEFS = (
    LayerDef("dec.b5.t1x1a", "tconv", 1536, 64, 1, l2=DECODER_L2),
    LayerDef("dec.b5.t3x3", "tconv", 64, 64, 3),
    LayerDef("dec.b5.t1x1b", "tconv", 64, 512, 1),
    LayerDef("dec.b6.t1x1a", "tconv", 512, 64, 1, l2=DECODER_L2),
    LayerDef("dec.b6.t5x5", "tconv", 64, 64, 5, upscale=True),
    LayerDef("dec.b6.t1x1b", "tconv", 64, 256, 1),
    LayerDef("dec.b7.t1x1a", "tconv", 256, 64, 1, l2=DECODER_L2),
    LayerDef("dec.b7.t3x3", "tconv", 64, 64, 3),
    LayerDef("dec.b7.t1x1b", "tconv", 64, 128, 1),
    LayerDef("dec.b8.t5x5", "tconv", 128, 64, 5, upscale=True, l2=DECODER_L2),
    LayerDef("dec.b9.t1x1", "tconv", 64, 1, 1),
)

ALL_DEFS = ENCODER_DEFS + DECODER_DEFS
DEFS_BY_NAME = {d.name: d for d in ALL_DEFS}


@dataclass
class LayerParams:
    name: str
    weights: np.ndarray
    bias: np.ndarray
    trainable: bool
    l2: float = 0.0


@dataclass
class ModelParams:
    layers: dict  # name -> LayerParams, in architecture order
    dtype: np.dtype = np.dtype(np.float32)

    def __getitem__(self, name) -> LayerParams:
        return self.layers[name]

    def trainable_layers(self):
        return [p for p in self.layers.values() if p.trainable]


def _glorot(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _weight_shape(d: LayerDef):
    if d.kind == "conv":
        return (d.out_ch, d.in_ch, d.kernel, d.kernel)
    return (d.in_ch, d.out_ch, d.kernel, d.kernel)


def build_model(encoder_weights=None, seed=0, dtype=np.float32) -> ModelParams:
    """Assemble the full parameter set.

    encoder_weights: optional container path (or parsed entry dict) holding
    exactly the 10 encoder conv layers; everything else is random-initialized
    with fan-based uniform bounds and zero biases.
    """
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    pretrained = None
    if encoder_weights is not None:
        entries = (encoder_weights if isinstance(encoder_weights, dict)
                   else read_container(encoder_weights))
        pretrained = _collect_layers(entries, ENCODER_DEFS, "encoder container")
    layers = {}
    for d in ALL_DEFS:
        shape = _weight_shape(d)
        fan_in = d.in_ch * d.kernel * d.kernel
        fan_out = d.out_ch * d.kernel * d.kernel
        if pretrained is not None and d.name in pretrained:
            w, b = pretrained[d.name]
            w = w.astype(dtype)
            b = b.astype(dtype)
        else:
            w = _glorot(rng, shape, fan_in, fan_out, dtype)
            b = np.zeros(d.out_ch, dtype=dtype)
        layers[d.name] = LayerParams(d.name, w, b, trainable=not d.frozen, l2=d.l2)
    return ModelParams(layers, dtype)


def count_parameters(model: ModelParams):
    """(total, trainable, frozen) scalar parameter counts."""
    total = trainable = 0
    for p in model.layers.values():
        n = p.weights.size + p.bias.size
        total += n
        if p.trainable:
            trainable += n
    return total, trainable, total - trainable


def layer_table(model: ModelParams):
    """Per-layer rows: (name, kind, weight shape, params, trainable, l2)."""
    rows = []
    for d in ALL_DEFS:
        p = model[d.name]
        rows.append((d.name, d.kind, tuple(p.weights.shape),
                     p.weights.size + p.bias.size, p.trainable, p.l2))
    return rows


# ------------------------------------------------------------------ forward

def _run_layer(model, d: LayerDef, x, training, rng, tape):
    p = model[d.name]
    op = conv2d_forward if d.kind == "conv" else tconv2d_forward
    out, ctx = op(x, p.weights, p.bias, d.spec())
    if tape is not None:
        tape.append((d.kind, d.name, ctx))
    if d.name == "dec.b9.t1x1":
        out, actx = pointwise_activation(out, "sigmoid")
        if tape is not None:
            tape.append(("sigmoid", None, actx))
    else:
        out, actx = pointwise_activation(out, "relu")
        if tape is not None:
            tape.append(("relu", None, actx))
    if d.dropout_after:
        out, dctx = dropout(out, DROPOUT_RATE, training, rng)
        if tape is not None:
            tape.append(("dropout", None, dctx))
    if d.pool_after:
        out, pctx = maxpool2x2_forward(out)
        if tape is not None:
            tape.append(("pool", None, pctx))
    return out


def encode_scale(model: ModelParams, image, training=False, rng=None, tape=None):
    """Blocks 1-4 on one scale: (3, h, w) -> (512, h/4, w/4)."""
    h, w = image.shape[-2:]
    if h % 4 or w % 4:
        raise ShapeError(f"encode_scale: extents must be multiples of 4, got {h}x{w}")
    x = np.ascontiguousarray(image, dtype=model.dtype)
    if tape is not None:
        tape.append(("scale_start", None, None))
    for d in ENCODER_DEFS:
        x = _run_layer(model, d, x, training, rng, tape)
    return x


def _pad4(image):
    h, w = image.shape[-2:]
    ph, pw = (-h) % 4, (-w) % 4
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect")


def forward(model: ModelParams, pyr: PyramidTriple, training=False, rng=None,
            tape=None):
    """Full network: pyramid triple -> probability map (1, H, W)."""
    h, w = pyr.i0.shape[-2:]
    if h % 4 or w % 4:
        raise ShapeError(f"forward: extents must be multiples of 4, got {h}x{w}")
    th, tw = h // 4, w // 4
    feats = []
    for s, image in enumerate(pyr.scales):
        # coarser levels may have odd extents; pad them into the encoder's
        # multiple-of-4 contract, then crop features back to the fine grid
        f = encode_scale(model, _pad4(image), training, rng, tape)
        if s > 0:
            factor = 2 ** s
            f = upsample_nearest(f, factor)
            if tape is not None:
                tape.append(("upsample", None, factor))
        if f.shape[-2:] != (th, tw):
            if tape is not None:
                tape.append(("crop", None, f.shape))
            f = f[:, :th, :tw]
        feats.append(f)
    x = concat_depth(feats)
    if tape is not None:
        tape.append(("concat", None, [f.shape[0] for f in feats]))
    for d in DECODER_DEFS:
        x = _run_layer(model, d, x, training, rng, tape)
    return x


# ----------------------------------------------------------------- backward

def backward(model: ModelParams, tape, grad_out):
    """Backward over the whole-network tape produced by forward().

    Returns {layer name: (grad_weights, grad_bias)} for trainable layers.
    Encoder gradients accumulate over the three shared scale paths.  Each
    scale segment stops at the deepest trainable layer: everything below is
    frozen and images need no input gradient.
    """
    # split the linear tape at the concat marker
    concat_idx = next(i for i, e in enumerate(tape) if e[0] == "concat")
    decoder_tape = tape[concat_idx + 1:]
    g = grad_out
    grads = {}
    for op, name, ctx in reversed(decoder_tape):
        if op in ("conv", "tconv"):
            back = conv2d_backward if op == "conv" else tconv2d_backward
            g, gw, gb = back(g, ctx)
            grads[name] = (gw, gb)
        elif op in ("relu", "sigmoid"):
            g = pointwise_activation_backward(g, ctx)
        elif op == "dropout":
            g = dropout_backward(g, ctx)
        else:
            raise ValueError(f"unexpected decoder op {op!r}")
    parts = concat_depth_backward(g, tape[concat_idx][2])

    # encoder segments, each bounded by its scale_start marker
    starts = [i for i, e in enumerate(tape[:concat_idx]) if e[0] == "scale_start"]
    bounds = list(zip(starts, starts[1:] + [concat_idx]))
    for (lo, hi), gseg in zip(bounds, parts):
        g = gseg
        for op, name, ctx in reversed(tape[lo + 1:hi]):
            if op == "conv":
                p = model[name]
                if not p.trainable:
                    break  # frozen from here down
                first = name == "enc.b4.c1"
                g, gw, gb = conv2d_backward(g, ctx, need_input_grad=not first)
                if name in grads:
                    grads[name][0] += gw
                    grads[name][1] += gb
                else:
                    grads[name] = [gw, gb]
                if first:
                    break
            elif op == "relu":
                g = pointwise_activation_backward(g, ctx)
            elif op == "dropout":
                g = dropout_backward(g, ctx)
            elif op == "pool":
                g = maxpool2x2_backward(g, ctx)
            elif op == "upsample":
                g = upsample_nearest_backward(g, ctx)
            elif op == "crop":
                full = np.zeros(ctx, dtype=g.dtype)
                full[:, :g.shape[1], :g.shape[2]] = g
                g = full
            else:
                raise ValueError(f"unexpected encoder op {op!r}")
    return {k: (np.asarray(v[0]), np.asarray(v[1])) for k, v in grads.items()}


# ------------------------------------------------------------ serialization

_MAGIC = b"FGSN"
_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_weights(model: ModelParams, path):
    """Write the container: magic, version, then name/dtype/dims/flags/data
    per tensor, little-endian throughout."""
    entries = []
    for p in model.layers.values():
        entries.append((f"{p.name}.weight", p.weights, p.trainable, p.l2))
        entries.append((f"{p.name}.bias", p.bias, p.trainable, 0.0))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(entries)))
        for name, arr, trainable, l2 in entries:
            code = _CODES_BY_DTYPE[np.dtype(arr.dtype)]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(struct.pack("<Bf", int(trainable), float(l2)))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def read_container(path):
    """Parse a container into {tensor name: (array, trainable, l2)}."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}, expected {_MAGIC!r}")
    if len(buf) < 12:
        raise ValueError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    entries = {}
    pos = 12
    for _ in range(count):
        try:
            (namelen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + namelen].decode("utf-8")
            pos += namelen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            trainable, l2 = struct.unpack_from("<Bf", buf, pos)
            pos += 5
            dtype = _DTYPE_CODES.get(code)
            if dtype is None:
                raise ValueError(f"{path}: unknown dtype code {code} for {name!r}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(buf):
                raise ValueError(f"{path}: truncated data for {name!r}")
            arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(dims)
            pos += nbytes
        except struct.error:
            raise ValueError(f"{path}: truncated container") from None
        if name in entries:
            raise ValueError(f"{path}: duplicate tensor {name!r}")
        entries[name] = (arr.copy(), bool(trainable), float(l2))
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return entries


def _collect_layers(entries, defs, what):
    """Validate entry names/shapes against layer definitions, strictly."""
    expected = set()
    out = {}
    for d in defs:
        wname, bname = f"{d.name}.weight", f"{d.name}.bias"
        expected.update((wname, bname))
        for key, shape in ((wname, _weight_shape(d)), (bname, (d.out_ch,))):
            if key not in entries:
                raise ValueError(f"{what}: missing tensor {key!r}")
            arr = entries[key][0]
            if arr.shape != shape:
                raise ValueError(f"{what}: {key!r} has shape {arr.shape}, "
                                 f"expected {shape}")
        out[d.name] = (entries[wname][0], entries[bname][0])
    unknown = sorted(set(entries) - expected)
    if unknown:
        raise ValueError(f"{what}: unknown tensors {unknown}")
    return out


def load_weights(path) -> ModelParams:
    """Strict full-model load; every architecture tensor must be present."""
    entries = read_container(path)
    arrays = _collect_layers(entries, ALL_DEFS, str(path))
    dtype = arrays["enc.b1.c1"][0].dtype
    layers = {}
    for d in ALL_DEFS:
        w, b = arrays[d.name]
        trainable = entries[f"{d.name}.weight"][1]
        l2 = entries[f"{d.name}.weight"][2]
        if trainable == d.frozen:  # flag must match the architecture
            raise ValueError(f"{path}: {d.name} trainable flag {trainable} "
                             f"contradicts the architecture")
        layers[d.name] = LayerParams(d.name, w.astype(dtype), b.astype(dtype),
                                     trainable, l2)
    return ModelParams(layers, np.dtype(dtype))


def get_state(model: ModelParams):
    """Deep copy of all weights, for checkpoint snapshots."""
    return {name: (p.weights.copy(), p.bias.copy())
            for name, p in model.layers.items()}


def set_state(model: ModelParams, state):
    for name, (w, b) in state.items():
        p = model[name]
        p.weights = w.copy()
        p.bias = b.copy()
