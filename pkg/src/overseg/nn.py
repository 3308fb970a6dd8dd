"""Framework-free neural-network kernels and a small U-Net.

All kernels operate on channel-first tensors and accept either a single
sample ``[C, H, W]`` or a batch ``[C, N, H, W]`` (channel outermost so a
single sample is just the N = 1 view of the same memory). Convolution is
cross-correlation (no kernel flip), stride 1, zero padding (k-1)/2, done
as one matrix product per layer over an im2col patch matrix. Training
runs in float32; every kernel also works in float64, which is what the
gradient checks use.

The U-Net here is the smallest encoder-decoder that keeps the classic
shape: per stage two 3x3 convs + ReLU, 2x2 max pooling down, nearest
upsampling + 3x3 conv up, skip concatenation (skip channels first), and
a 1x1 sigmoid head for independent per-class masks.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError
from .rng import Rng

_MODEL_MAGIC = b"UNET"
_MODEL_VERSION = 1
_CONFIG_KEYS = ("in_channels", "n_classes", "base_filters", "depth",
                "kernel_size", "height", "width")


# ---------------------------------------------------------------------------
# elementwise activations


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Gradient mask from the forward INPUT (or output: same sign set)."""
    return grad_out * (x > 0)


def sigmoid_forward(x):
    # exp of a non-positive number never overflows; both branches share it
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid_backward(sig, grad_out):
    """Gradient from the forward OUTPUT: sig * (1 - sig) * upstream."""
    return grad_out * sig * (1.0 - sig)


# ---------------------------------------------------------------------------
# convolution


def _as_batch(x):
    """View [C,H,W] as [C,1,H,W]; pass [C,N,H,W] through."""
    if x.ndim == 3:
        return x[:, None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected 3 or 4 dims, got shape {x.shape}")


def _im2col(x, k):
    """Patch matrix [C*k*k, N*H*W] for same-padded stride-1 windows."""
    c, n, h, w = x.shape
    if k == 1:
        return x.reshape(c, n * h * w)
    p = (k - 1) // 2
    padded = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    padded[:, :, p:p + h, p:p + w] = x
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = padded[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, n * h * w)


def _check_conv_shapes(x, kernel, bias=None):
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be [out,in,k,k], got {kernel.shape}")
    if kernel.shape[3] % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {kernel.shape[3]}")
    if x.shape[0] != kernel.shape[1]:
        raise ValueError(
            f"input has {x.shape[0]} channels, kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(
            f"bias shape {bias.shape} does not match {kernel.shape[0]} outputs")


def conv2d_forward(x, kernel, bias):
    """Same-size cross-correlation: out[o] = bias[o] + sum_c x[c] * K[o,c]."""
    x, single = _as_batch(np.asarray(x))
    _check_conv_shapes(x, kernel, bias)
    c_out, c_in, k, _ = kernel.shape
    _, n, h, w = x.shape
    out = kernel.reshape(c_out, c_in * k * k) @ _im2col(x, k)
    out += bias[:, None]
    out = out.reshape(c_out, n, h, w)
    return out[:, 0] if single else out


def conv2d_backward(x, kernel, grad_out):
    """Gradients of conv2d_forward w.r.t. (input, kernel, bias)."""
    x, single = _as_batch(np.asarray(x))
    grad_out, gsingle = _as_batch(np.asarray(grad_out))
    _check_conv_shapes(x, kernel)
    if single != gsingle:
        raise ValueError("input and grad_out batch shapes disagree")
    c_out, c_in, k, _ = kernel.shape
    if grad_out.shape != (c_out, x.shape[1], x.shape[2], x.shape[3]):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output")

    grad_bias = grad_out.sum(axis=(1, 2, 3))
    go_mat = grad_out.reshape(c_out, -1)
    grad_kernel = (go_mat @ _im2col(x, k).T).reshape(kernel.shape)
    # input gradient = same-padded correlation with the flipped, transposed
    # kernel (the adjoint of the forward patch product)
    k_adj = np.ascontiguousarray(
        kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_in = k_adj.reshape(c_in, c_out * k * k) @ _im2col(grad_out, k)
    grad_in = grad_in.reshape(x.shape)
    if single:
        grad_in = grad_in[:, 0]
    return grad_in, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# pooling / upsampling / concatenation


def maxpool2_forward(x):
    """2x2 max pool; argmax keeps each block's winning in-block flat index
    (0..3, row-major within the block, first winner on ties)."""
    x, single = _as_batch(np.asarray(x))
    c, n, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    blocks = x.reshape(c, n, h // 2, 2, w // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(c, n, h // 2, w // 2, 4)
    argmax = blocks.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(blocks, argmax[..., None].astype(np.intp),
                             axis=-1)[..., 0]
    if single:
        return out[:, 0], argmax[:, 0]
    return out, argmax


def maxpool2_backward(argmax, grad_out):
    """Route each pooled gradient back to its argmax position."""
    argmax, single = _as_batch(np.asarray(argmax))
    grad_out, gsingle = _as_batch(np.asarray(grad_out))
    if argmax.shape != grad_out.shape or single != gsingle:
        raise ValueError(
            f"argmax shape {argmax.shape} does not match grad_out "
            f"{grad_out.shape}")
    c, n, h2, w2 = grad_out.shape
    blocks = np.zeros((c, n, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None].astype(np.intp),
                      grad_out[..., None], axis=-1)
    grad_in = blocks.reshape(c, n, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    grad_in = grad_in.reshape(c, n, h2 * 2, w2 * 2)
    return grad_in[:, 0] if single else grad_in


def upsample2_nearest_forward(x):
    """Replicate every pixel into a 2x2 block."""
    x = np.asarray(x)
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def upsample2_nearest_backward(grad_out):
    """Sum each 2x2 block back into its source pixel."""
    grad_out = np.asarray(grad_out)
    h, w = grad_out.shape[-2] // 2, grad_out.shape[-1] // 2
    shape = grad_out.shape[:-2] + (h, 2, w, 2)
    return grad_out.reshape(shape).sum(axis=(-3, -1))


def concat_channels(a, b):
    """Stack b's channels after a's; spatial dims must agree."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"spatial mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=0)


def split_channels(grad, c_first):
    """Backward of concat_channels: split at the first input's width."""
    return grad[:c_first], grad[c_first:]


# ---------------------------------------------------------------------------
# U-Net


@dataclass
class UNetConfig:
    in_channels: int = 1
    n_classes: int = 5
    base_filters: int = 16
    depth: int = 2
    kernel_size: int = 3
    height: int = 28
    width: int = 28

    def __post_init__(self):
        if self.in_channels < 1 or self.n_classes < 1 or self.base_filters < 1:
            raise ValueError("channel counts must be >= 1")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            raise ValueError(
                f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        step = 1 << self.depth
        if self.height % step or self.width % step:
            raise ValueError(
                f"input {self.height}x{self.width} not divisible by 2^depth"
                f" = {step}")

    def stage_filters(self):
        return [self.base_filters << s for s in range(self.depth)]


def param_shapes(config):
    """Ordered parameter table {name: shape}; order fixes init and files."""
    k = config.kernel_size
    filters = config.stage_filters()
    bottom = config.base_filters << config.depth
    shapes = {}

    def conv(name, c_out, c_in, size):
        shapes[f"{name}.w"] = (c_out, c_in, size, size)
        shapes[f"{name}.b"] = (c_out,)

    prev = config.in_channels
    for s, f in enumerate(filters, start=1):
        conv(f"enc{s}_conv1", f, prev, k)
        conv(f"enc{s}_conv2", f, f, k)
        prev = f
    conv("bottleneck_conv1", bottom, prev, k)
    conv("bottleneck_conv2", bottom, bottom, k)
    below = bottom
    for s in range(config.depth, 0, -1):
        f = filters[s - 1]
        conv(f"dec{s}_up_conv", f, below, k)
        conv(f"dec{s}_merge_conv", f, 2 * f, k)
        below = f
    conv("head", config.n_classes, filters[0], 1)
    return shapes


def count_params(config):
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_params(config, seed):
    """He-normal weights (std = sqrt(2 / (in_ch * k^2))), zero biases.

    All weight values come from one portable generator stream walked in
    parameter-table order, so a seed pins every tensor on any platform.
    """
    rng = Rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            std = np.sqrt(2.0 / fan_in)
            values = rng.normals(int(np.prod(shape))) * std
            params[name] = values.astype(np.float32).reshape(shape)
    return params


def _conv_relu(params, name, x):
    return relu_forward(conv2d_forward(x, params[name + ".w"],
                                       params[name + ".b"]))


def unet_forward(params, config, image):
    """Forward pass for one [H, W] image -> ([n_classes, H, W], cache)."""
    image = np.asarray(image)
    if image.shape != (config.height, config.width):
        raise ValueError(
            f"image shape {image.shape} does not match config "
            f"{(config.height, config.width)}")
    probs, cache = unet_forward_batch(params, config, image[None])
    cache["single"] = True
    return probs[:, 0], cache


def unet_forward_batch(params, config, images):
    """Forward pass for [N, H, W] images -> ([n_classes, N, H, W], cache)."""
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[1:] != (config.height, config.width):
        raise ValueError(
            f"images shape {images.shape} does not match config "
            f"{(config.height, config.width)}")
    x = images[None].astype(images.dtype, copy=False)  # [1, N, H, W]

    enc_in, enc_mid, skips, pool_arg = [], [], [], []
    for s in range(1, config.depth + 1):
        mid = _conv_relu(params, f"enc{s}_conv1", x)
        skip = _conv_relu(params, f"enc{s}_conv2", mid)
        enc_in.append(x)
        enc_mid.append(mid)
        skips.append(skip)
        x, argmax = maxpool2_forward(skip)
        pool_arg.append(argmax)

    bott_in = x
    bott_mid = _conv_relu(params, "bottleneck_conv1", x)
    x = _conv_relu(params, "bottleneck_conv2", bott_mid)
    bott_out = x

    dec = []
    for s in range(config.depth, 0, -1):
        up = upsample2_nearest_forward(x)
        d = _conv_relu(params, f"dec{s}_up_conv", up)
        merged = concat_channels(skips[s - 1], d)
        x = _conv_relu(params, f"dec{s}_merge_conv", merged)
        dec.append({"stage": s, "up": up, "d": d, "merged": merged, "out": x})

    logits = conv2d_forward(x, params["head.w"], params["head.b"])
    probs = sigmoid_forward(logits)

    if not np.isfinite(probs).all():
        _raise_at_bad_layer(config, enc_mid, skips, bott_mid, bott_out, dec,
                            probs)

    cache = {
        "config": config, "params": params, "single": False,
        "enc_in": enc_in, "enc_mid": enc_mid, "skips": skips,
        "pool_arg": pool_arg, "bott_in": bott_in, "bott_mid": bott_mid,
        "bott_out": bott_out, "dec": dec, "probs": probs,
    }
    return probs, cache


def _raise_at_bad_layer(config, enc_mid, skips, bott_mid, bott_out, dec,
                        probs):
    # happy path never pays for this: only reached when probs went bad
    tensors = []
    for s in range(1, config.depth + 1):
        tensors.append((f"enc{s}_conv1", enc_mid[s - 1]))
        tensors.append((f"enc{s}_conv2", skips[s - 1]))
    tensors.append(("bottleneck_conv1", bott_mid))
    tensors.append(("bottleneck_conv2", bott_out))
    for rec in dec:
        tensors.append((f"dec{rec['stage']}_up_conv", rec["d"]))
        tensors.append((f"dec{rec['stage']}_merge_conv", rec["out"]))
    tensors.append(("head", probs))
    for name, t in tensors:
        if not np.isfinite(t).all():
            raise NumericError("non-finite activation", where=name)
    raise NumericError("non-finite activation", where="head")


def unet_backward(cache, grad_probs):
    """Exact reverse-mode gradients, returned in parameter-table order."""
    params = cache["params"]
    config = cache["config"]
    probs = cache["probs"]
    grad_probs = np.asarray(grad_probs)
    if cache.get("single"):
        grad_probs = grad_probs[:, None]
    if grad_probs.shape != probs.shape:
        raise ValueError(
            f"grad shape {grad_probs.shape} does not match output "
            f"{probs.shape}")
    grads = {}

    def conv_back(name, x_in, g):
        gi, gw, gb = conv2d_backward(x_in, params[name + ".w"], g)
        grads[name + ".w"] = gw
        grads[name + ".b"] = gb
        return gi

    g = sigmoid_backward(probs, grad_probs)
    g = conv_back("head", cache["dec"][-1]["out"], g)

    skip_grads = {}
    for rec in reversed(cache["dec"]):
        s = rec["stage"]
        g = relu_backward(rec["out"], g)
        g = conv_back(f"dec{s}_merge_conv", rec["merged"], g)
        g_skip, g_d = split_channels(g, cache["skips"][s - 1].shape[0])
        skip_grads[s] = g_skip
        g_d = relu_backward(rec["d"], g_d)
        g = conv_back(f"dec{s}_up_conv", rec["up"], g_d)
        g = upsample2_nearest_backward(g)

    g = relu_backward(cache["bott_out"], g)
    g = conv_back("bottleneck_conv2", cache["bott_mid"], g)
    g = relu_backward(cache["bott_mid"], g)
    g = conv_back("bottleneck_conv1", cache["bott_in"], g)

    for s in range(config.depth, 0, -1):
        g = maxpool2_backward(cache["pool_arg"][s - 1], g)
        g = g + skip_grads[s]
        g = relu_backward(cache["skips"][s - 1], g)
        g = conv_back(f"enc{s}_conv2", cache["enc_mid"][s - 1], g)
        g = relu_backward(cache["enc_mid"][s - 1], g)
        g = conv_back(f"enc{s}_conv1", cache["enc_in"][s - 1], g)

    return {name: grads[name] for name in params}


# ---------------------------------------------------------------------------
# model file


def _config_json(config):
    doc = {key: getattr(config, key) for key in _CONFIG_KEYS}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def save_model(params, config, sink):
    """Write magic, version, config JSON, then each named f32 tensor.

    Layout (little-endian): "UNET", version u16, config-JSON length u32 +
    bytes, tensor count u16, per tensor name length u16 + UTF-8 name,
    ndims u8, dims u32 each, raw little-endian float32 values row-major.
    Returns the byte count written.
    """
    close = False
    if isinstance(sink, str):
        sink = open(sink, "wb")
        close = True
    try:
        blob = _config_json(config)
        n = sink.write(_MODEL_MAGIC)
        n += sink.write(struct.pack("<H", _MODEL_VERSION))
        n += sink.write(struct.pack("<I", len(blob)))
        n += sink.write(blob)
        n += sink.write(struct.pack("<H", len(params)))
        for name, tensor in params.items():
            encoded = name.encode()
            n += sink.write(struct.pack("<H", len(encoded)))
            n += sink.write(encoded)
            n += sink.write(struct.pack("<B", tensor.ndim))
            n += sink.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            n += sink.write(
                np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        return n
    finally:
        if close:
            sink.close()


def load_model(source):
    """Read a model file back into (params, config); validates shapes."""
    close = False
    if isinstance(source, str):
        source = open(source, "rb")
        close = True
    try:
        data = source.read()
    finally:
        if close:
            source.close()

    def need(count, offset, what):
        if offset + count > len(data):
            raise FormatError(f"truncated {what}", offset=len(data))

    need(4, 0, "magic")
    if data[:4] != _MODEL_MAGIC:
        raise FormatError(
            f"bad magic {data[:4]!r}, expected {_MODEL_MAGIC!r}", offset=0)
    need(2, 4, "version")
    version = struct.unpack_from("<H", data, 4)[0]
    if version != _MODEL_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    need(4, 6, "config length")
    blob_len = struct.unpack_from("<I", data, 6)[0]
    need(blob_len, 10, "config JSON")
    try:
        doc = json.loads(data[10:10 + blob_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad config JSON: {exc}", offset=10) from None
    if set(doc) != set(_CONFIG_KEYS):
        raise FormatError(
            f"config keys {sorted(doc)} != expected {sorted(_CONFIG_KEYS)}",
            offset=10)
    config = UNetConfig(**doc)

    pos = 10 + blob_len
    need(2, pos, "tensor count")
    count = struct.unpack_from("<H", data, pos)[0]
    pos += 2
    params = {}
    for _ in range(count):
        need(2, pos, "name length")
        name_len = struct.unpack_from("<H", data, pos)[0]
        pos += 2
        need(name_len, pos, "name")
        name = data[pos:pos + name_len].decode()
        pos += name_len
        need(1, pos, "ndims")
        ndim = data[pos]
        pos += 1
        need(4 * ndim, pos, "dims")
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        numel = int(np.prod(shape)) if ndim else 1
        need(4 * numel, pos, "tensor data")
        values = np.frombuffer(data, dtype="<f4", count=numel, offset=pos)
        params[name] = values.reshape(shape).copy()
        pos += 4 * numel
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", offset=pos)

    expected = param_shapes(config)
    if list(params) != list(expected):
        raise FormatError(
            f"parameter names {list(params)} do not match config table",
            offset=10)
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise FormatError(
                f"tensor {name} has shape {params[name].shape}, "
                f"expected {shape}", offset=10)
    return params, config
