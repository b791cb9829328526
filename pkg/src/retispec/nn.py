"""Minimal reverse-mode autograd on numpy arrays and the desk-scale
two-stage cross-attention detector built on top of it.

The detector consumes four map branches (image, texture, direct light,
specular residual).  Small conv blocks turn each branch into an 8x8 token
grid; stage 1 cross-attends texture tokens onto direct-light tokens
(out = softmax(q kv^T / sqrt(d)) kv + q + kv), a middle conv block refines
the result, and stage 2 cross-attends it onto specular tokens
(out = ... + kv).  Pooled attention features are concatenated with pooled
image features and a linear head yields two logits (real/fake).

Everything runs in float64 so analytic gradients can be validated against
central finite differences at tight tolerances.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "relu", "conv2d", "avg_pool", "softmax", "concat", "cross_entropy_with_logits",
    "cross_attention", "tokens_from_map", "map_from_tokens",
    "ModelConfig", "init_model_params", "model_forward", "predict_proba",
    "TrainConfig", "TrainingError", "train", "load_training_arrays",
    "save_checkpoint", "load_checkpoint",
    "gradient_check", "check_model_gradients", "OP_CHECK_BUILDERS",
]


# ---------------------------------------------------------------------------
# Autograd core
# ---------------------------------------------------------------------------

class Tensor:
    """A numpy array with a backward closure for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in tensor")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def mean(self, axis):
        return mean(self, axis)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t, g):
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def _bp(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = _bp
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def _bp(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = _bp
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def _bp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    out._backward = _bp
    return out


def relu(x):
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,))

    def _bp(g):
        _accum(x, g * (x.data > 0.0))

    out._backward = _bp
    return out


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), _parents=(x,))

    def _bp(g):
        _accum(x, g.reshape(x.data.shape))

    out._backward = _bp
    return out


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes), _parents=(x,))
    inverse = tuple(np.argsort(axes))

    def _bp(g):
        _accum(x, g.transpose(inverse))

    out._backward = _bp
    return out


def mean(x, axis):
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis), _parents=(x,))
    count = x.data.shape[axis]

    def _bp(g):
        _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape) / count)

    out._backward = _bp
    return out


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def _bp(g):
        splits = np.cumsum(sizes)[:-1]
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    out._backward = _bp
    return out


def softmax(x, axis=-1):
    """Numerically stable softmax; rows along `axis` sum to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(x,))

    def _bp(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    out._backward = _bp
    return out


def conv2d(x, w, b):
    """3x3 convolution, stride 1, zero padding 1, on (N, C, H, W)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if (cin_w, kh, kw) != (cin, 3, 3) or b.data.shape != (cout,):
        raise ValueError("conv2d expects w (Cout,Cin,3,3) matching x and b (Cout,)")
    xpad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xpad, (3, 3), axis=(2, 3))      # (N,Cin,H,W,3,3)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * wd, cin * 9)
    wm = w.data.reshape(cout, cin * 9)
    val = cols @ wm.T + b.data                                 # (N,HW,Cout)
    out = Tensor(val.transpose(0, 2, 1).reshape(n, cout, h, wd),
                 _parents=(x, w, b))

    def _bp(g):
        gof = g.reshape(n, cout, h * wd).transpose(0, 2, 1)    # (N,HW,Cout)
        _accum(b, gof.sum(axis=(0, 1)))
        _accum(w, np.einsum("npo,npk->ok", gof, cols).reshape(w.data.shape))
        gcols = gof @ wm                                       # (N,HW,Cin*9)
        gwin = gcols.reshape(n, h, wd, cin, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        gxpad = np.zeros_like(xpad)
        for di in range(3):
            for dj in range(3):
                gxpad[:, :, di : di + h, dj : dj + wd] += gwin[..., di, dj]
        _accum(x, gxpad[:, :, 1:-1, 1:-1])

    out._backward = _bp
    return out


def avg_pool(x, factor):
    """Non-overlapping average pooling by an integer factor on (N,C,H,W)."""
    x = _as_tensor(x)
    f = int(factor)
    n, c, h, w = x.data.shape
    if h % f or w % f:
        raise ValueError(f"spatial dims {h}x{w} not divisible by pool factor {f}")
    val = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    out = Tensor(val, _parents=(x,))

    def _bp(g):
        _accum(x, np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f))

    out._backward = _bp
    return out


def cross_entropy_with_logits(logits, labels):
    """Mean softmax cross-entropy; labels are integer class indices."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.data.shape[0]
    m = logits.data.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits.data - m).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - logits.data[np.arange(n), labels]
    out = Tensor(nll.mean(), _parents=(logits,))

    def _bp(g):
        p = np.exp(logits.data - lse)
        p[np.arange(n), labels] -= 1.0
        _accum(logits, (float(g) / n) * p)

    out._backward = _bp
    return out


# ---------------------------------------------------------------------------
# Attention and token plumbing
# ---------------------------------------------------------------------------

def cross_attention(q, kv, residuals, wq=None, wk=None, wv=None):
    """out = softmax(q kv^T / sqrt(d), over keys) kv + sum(residuals).

    q, kv: (L, d) or (N, L, d).  Optional learned projections apply to the
    query/key/value roles; by default the raw features are used.
    """
    q, kv = _as_tensor(q), _as_tensor(kv)
    if q.shape[-1] == 0 or q.shape[-2] == 0:
        raise ValueError("cross_attention requires L >= 1 and d >= 1")
    if q.shape[-1] != kv.shape[-1]:
        raise ValueError("q and kv must share the feature dimension")
    d = q.shape[-1]
    qq = q if wq is None else matmul(q, wq)
    kk = kv if wk is None else matmul(kv, wk)
    vv = kv if wv is None else matmul(kv, wv)
    axes = (1, 0) if kk.ndim == 2 else (0, 2, 1)
    scores = mul(matmul(qq, transpose(kk, axes)), 1.0 / np.sqrt(d))
    out = matmul(softmax(scores, axis=-1), vv)
    for r in residuals:
        out = add(out, r)
    return out


def tokens_from_map(x, grid=8):
    """(N, C, H, W) -> (N, grid*grid, C) by average pooling to the grid."""
    n, c, h, w = x.shape
    if h != w or h % grid:
        raise ValueError(f"feature map {h}x{w} incompatible with {grid}x{grid} tokens")
    pooled = avg_pool(x, h // grid) if h > grid else x
    return transpose(reshape(pooled, (n, c, grid * grid)), (0, 2, 1))


def map_from_tokens(t, grid=8):
    """(N, L, C) -> (N, C, grid, grid), inverse of tokens_from_map layout."""
    n, l, c = t.shape
    if l != grid * grid:
        raise ValueError(f"token count {l} != grid {grid}^2")
    return reshape(transpose(t, (0, 2, 1)), (n, c, grid, grid))


# ---------------------------------------------------------------------------
# Detector model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    input_size: int = 32
    token_grid: int = 8
    mode: str = "full"                 # full | concat | image_only
    learned_projections: bool = False

    def __post_init__(self):
        if self.mode not in ("full", "concat", "image_only"):
            raise ValueError(f"unknown mode {self.mode!r}")
        down = self.input_size // 2    # entry block pools once
        if down % self.token_grid:
            raise ValueError("input_size/2 must be a multiple of token_grid")

    def branch_names(self):
        if self.mode == "image_only":
            return ("img",)
        return ("img", "tex", "dir", "spr")


def _head_width(config):
    c = config.channels
    return {"full": 2 * c, "concat": 4 * c, "image_only": c}[config.mode]


def init_model_params(config, seed=0):
    """Seeded uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)] per tensor."""
    rng = np.random.default_rng(seed)
    c = config.channels
    params = {}

    def u(name, shape, fan_in):
        s = np.sqrt(1.0 / fan_in)
        params[name] = Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)

    for br in config.branch_names():
        u(f"{br}.conv1.w", (c, 3, 3, 3), 3 * 9)
        u(f"{br}.conv1.b", (c,), 3 * 9)
        u(f"{br}.conv2.w", (c, c, 3, 3), c * 9)
        u(f"{br}.conv2.b", (c,), c * 9)
    if config.mode == "full":
        u("middle.conv1.w", (c, c, 3, 3), c * 9)
        u("middle.conv1.b", (c,), c * 9)
        u("middle.conv2.w", (c, c, 3, 3), c * 9)
        u("middle.conv2.b", (c,), c * 9)
        if config.learned_projections:
            for stage in ("attn1", "attn2"):
                for role in ("wq", "wk", "wv"):
                    u(f"{stage}.{role}", (c, c), c)
    u("head.w", (_head_width(config), 2), _head_width(config))
    u("head.b", (2,), _head_width(config))
    return params


def _entry_block(params, prefix, x):
    h = relu(conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"]))
    h = relu(conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"]))
    return avg_pool(h, 2)


def _middle_block(params, x):
    h = relu(conv2d(x, params["middle.conv1.w"], params["middle.conv1.b"]))
    return relu(conv2d(h, params["middle.conv2.w"], params["middle.conv2.b"]))


def _proj(params, config, stage, role):
    if config.mode == "full" and config.learned_projections:
        return params[f"{stage}.{role}"]
    return None


def model_forward(params, inputs, config):
    """inputs: dict of branch name -> Tensor (N, 3, S, S); returns logits
    Tensor (N, 2)."""
    grid = config.token_grid
    tokens = {}
    for br in config.branch_names():
        if br not in inputs:
            raise ValueError(f"missing input branch {br!r}")
        tokens[br] = tokens_from_map(_entry_block(params, br, inputs[br]), grid)

    pooled_img = mean(tokens["img"], 1)
    if config.mode == "image_only":
        fused = pooled_img
    elif config.mode == "concat":
        fused = concat([mean(tokens["tex"], 1), mean(tokens["dir"], 1),
                        mean(tokens["spr"], 1), pooled_img], axis=-1)
    else:
        f_td = cross_attention(tokens["tex"], tokens["dir"],
                               residuals=[tokens["tex"], tokens["dir"]],
                               wq=_proj(params, config, "attn1", "wq"),
                               wk=_proj(params, config, "attn1", "wk"),
                               wv=_proj(params, config, "attn1", "wv"))
        refined = tokens_from_map(_middle_block(params, map_from_tokens(f_td, grid)),
                                  grid)
        f_std = cross_attention(refined, tokens["spr"],
                                residuals=[tokens["spr"]],
                                wq=_proj(params, config, "attn2", "wq"),
                                wk=_proj(params, config, "attn2", "wk"),
                                wv=_proj(params, config, "attn2", "wv"))
        fused = concat([mean(f_std, 1), pooled_img], axis=-1)
    return add(matmul(fused, params["head.w"]), params["head.b"])


def predict_proba(params, inputs, config):
    """Softmax class probabilities (N, 2) without building gradients."""
    logits = model_forward(params, {k: _as_tensor(v) for k, v in inputs.items()},
                           config)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "full"
    channels: int = 8
    input_size: int = 32
    learned_projections: bool = False
    feature_space: str = "uv"          # uv | image

    def model_config(self):
        return ModelConfig(channels=self.channels, input_size=self.input_size,
                           mode=self.mode,
                           learned_projections=self.learned_projections)


def _block_mean(img, out_size):
    """Downsample (H, W, C) to (out_size, out_size, C) by block averaging."""
    h, w, c = img.shape
    if h % out_size or w % out_size:
        raise ValueError(f"cannot block-pool {h}x{w} to {out_size}")
    fh, fw = h // out_size, w // out_size
    return img.reshape(out_size, fh, out_size, fw, c).mean(axis=(1, 3))


def load_training_arrays(manifest, input_size=32, feature_space="uv"):
    """Load manifest samples into branch arrays (N, 3, S, S) plus labels.

    Each manifest entry carries the image path and its decomposition bundle
    directory; maps come from the bundle at their recorded value scale.
    feature_space picks UV-flattened or image-space texture/direct/specular
    maps.
    """
    from pathlib import Path

    from .pipeline import load_exported_maps
    from .raster import load_raster

    if feature_space == "uv":
        names = ("uv_texture", "uv_direct", "uv_specular")
    elif feature_space == "image":
        names = ("texture", "direct", "specular")
    else:
        raise ValueError(f"unknown feature_space {feature_space!r}")
    if isinstance(manifest, (str, Path)):
        with open(manifest) as fh:
            manifest = json.load(fh)["samples"]
    branches = {"img": [], "tex": [], "dir": [], "spr": []}
    labels = []
    for entry in manifest:
        img = load_raster(Path(entry["image"])).pixels
        maps, _ = load_exported_maps(Path(entry["bundle"]), names=names)
        branches["img"].append(_block_mean(img, input_size))
        for key, name in zip(("tex", "dir", "spr"), names):
            branches[key].append(_block_mean(maps[name].pixels, input_size))
        labels.append(0 if entry["label"] == "real" else 1)
    arrays = {k: np.stack(v).transpose(0, 3, 1, 2) for k, v in branches.items()}
    return arrays, np.asarray(labels, dtype=np.int64)


def train(arrays, labels, config):
    """Adam training loop: deterministic for a fixed seed.

    arrays: dict of branch -> (N, 3, S, S); labels: (N,) in {0, 1}.
    Returns {"params", "config", "loss_curve", "metrics"}.
    """
    model_cfg = config.model_config()
    params = init_model_params(model_cfg, seed=config.seed)
    names = sorted(params)
    m = {k: np.zeros_like(params[k].data) for k in names}
    v = {k: np.zeros_like(params[k].data) for k in names}
    rng = np.random.default_rng(config.seed + 1)
    n = labels.shape[0]
    needed = model_cfg.branch_names()
    step = 0
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = {br: Tensor(arrays[br][idx]) for br in needed}
            try:
                loss = cross_entropy_with_logits(
                    model_forward(params, batch, model_cfg), labels[idx])
            except FloatingPointError as exc:
                raise TrainingError(
                    f"non-finite forward at epoch {epoch} step {step}: {exc}")
            if not np.isfinite(loss.data):
                raise TrainingError(f"NaN loss at epoch {epoch} step {step}; "
                                    f"last finite losses: {losses[-3:]}")
            loss.backward()
            step += 1
            b1t = 1.0 - config.beta1 ** step
            b2t = 1.0 - config.beta2 ** step
            for k in names:
                g = params[k].grad
                if g is None:
                    continue
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g
                v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g
                params[k].data = params[k].data - config.lr * (m[k] / b1t) / (
                    np.sqrt(v[k] / b2t) + config.eps)
            losses.append(float(loss.data))
        curve.append(float(np.mean(losses)))
    probs = _predict_in_batches(params, arrays, labels.shape[0], model_cfg,
                                config.batch_size)
    acc = float(np.mean((probs[:, 1] > 0.5).astype(int) == labels))
    return {
        "params": params,
        "config": config,
        "loss_curve": curve,
        "metrics": {"final_loss": curve[-1] if curve else None,
                    "train_accuracy": acc},
    }


def _predict_in_batches(params, arrays, n, model_cfg, batch_size):
    out = []
    needed = model_cfg.branch_names()
    for start in range(0, n, batch_size):
        batch = {br: arrays[br][start : start + batch_size] for br in needed}
        out.append(predict_proba(params, batch, model_cfg))
    return np.concatenate(out, axis=0)


def score_with_model(params, arrays, model_cfg, batch_size=16):
    """Probability of the fake class for every sample."""
    n = next(iter(arrays.values())).shape[0]
    return _predict_in_batches(params, arrays, n, model_cfg, batch_size)[:, 1]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"RSPCKPT\x00"
_CKPT_VERSION = 1


def save_checkpoint(path, params, config):
    """Versioned binary layout: magic, version, config JSON, then name-sorted
    float64 little-endian payloads."""
    cfg_json = json.dumps(asdict(config) if not isinstance(config, dict)
                          else config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        names = sorted(params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params[name].data if isinstance(params[name], Tensor) \
                else np.asarray(params[name], dtype=np.float64)
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params dict name -> Tensor, config dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    off = 8
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = json.loads(blob[off : off + cfg_len].decode())
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
        off += 8 * size
        params[name] = Tensor(data.reshape(shape).copy(), requires_grad=True)
    return params, config


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def gradient_check(build_loss, tensors, step=1e-5, rtol=1e-5, atol=1e-7,
                   max_entries=None, seed=0):
    """Compare analytic gradients of build_loss() against central finite
    differences for every (or a sampled subset of) entry of each tensor.

    An entry passes when |analytic - numeric| <= atol or when the relative
    error |a - n| / (|a| + |n|) <= rtol; the absolute branch covers
    gradients near zero where the relative measure is dominated by
    floating-point noise.  Returns (max_relative_error, failures).
    """
    loss = build_loss()
    loss.backward()
    analytic = {name: t.grad.copy() if t.grad is not None
                else np.zeros_like(t.data) for name, t in tensors.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(build_loss().data)
            flat[i] = orig - step
            f_minus = float(build_loss().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric)
            denom = abs(a) + abs(numeric)
            rel = err / denom if denom > 0 else 0.0
            if err > atol and rel > worst:
                worst = rel
            if err > atol and rel > rtol:
                failures.append((name, int(i), float(a), float(numeric), rel))
    return worst, failures


def _op_check_inputs(seed, shapes, shift=0.25):
    """Random inputs kept away from relu kinks (|x| >= shift margin)."""
    rng = np.random.default_rng(seed)
    out = []
    for shape in shapes:
        x = rng.uniform(0.3, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        out.append(Tensor(x + shift * np.sign(x), requires_grad=True))
    return out


def _scalarize(t, seed=0):
    rng = np.random.default_rng(seed + 17)
    w = Tensor(rng.uniform(0.5, 1.5, size=t.shape))
    return mean(reshape(mul(t, w), (-1,)), 0)


OP_CHECK_BUILDERS = {}


def _register_op_check(name):
    def wrap(fn):
        OP_CHECK_BUILDERS[name] = fn
        return fn
    return wrap


@_register_op_check("add")
def _check_add(seed):
    a, b = _op_check_inputs(seed, [(3, 4), (3, 4)])
    return lambda: _scalarize(add(a, b), seed), {"a": a, "b": b}


@_register_op_check("mul")
def _check_mul(seed):
    a, b = _op_check_inputs(seed, [(3, 4), (3, 4)])
    return lambda: _scalarize(mul(a, b), seed), {"a": a, "b": b}


@_register_op_check("matmul")
def _check_matmul(seed):
    a, b = _op_check_inputs(seed, [(2, 3, 4), (2, 4, 5)])
    return lambda: _scalarize(matmul(a, b), seed), {"a": a, "b": b}


@_register_op_check("relu")
def _check_relu(seed):
    (a,) = _op_check_inputs(seed, [(4, 5)])
    return lambda: _scalarize(relu(a), seed), {"a": a}


@_register_op_check("conv2d")
def _check_conv2d(seed):
    x, w, b = _op_check_inputs(seed, [(2, 3, 6, 6), (4, 3, 3, 3), (4,)])
    return lambda: _scalarize(conv2d(x, w, b), seed), {"x": x, "w": w, "b": b}


@_register_op_check("avg_pool")
def _check_avg_pool(seed):
    (x,) = _op_check_inputs(seed, [(2, 3, 6, 6)])
    return lambda: _scalarize(avg_pool(x, 2), seed), {"x": x}


@_register_op_check("softmax")
def _check_softmax(seed):
    (x,) = _op_check_inputs(seed, [(3, 5)])
    return lambda: _scalarize(softmax(x), seed), {"x": x}


@_register_op_check("concat")
def _check_concat(seed):
    a, b = _op_check_inputs(seed, [(3, 4), (3, 2)])
    return lambda: _scalarize(concat([a, b], axis=-1), seed), {"a": a, "b": b}


@_register_op_check("mean")
def _check_mean(seed):
    (x,) = _op_check_inputs(seed, [(3, 5, 4)])
    return lambda: _scalarize(mean(x, 1), seed), {"x": x}


@_register_op_check("cross_attention")
def _check_cross_attention(seed):
    q, kv = _op_check_inputs(seed, [(2, 4, 3), (2, 4, 3)])
    return (lambda: _scalarize(cross_attention(q, kv, residuals=[q, kv]), seed),
            {"q": q, "kv": kv})


@_register_op_check("cross_entropy")
def _check_cross_entropy(seed):
    (z,) = _op_check_inputs(seed, [(5, 2)])
    labels = np.array([0, 1, 1, 0, 1])
    return lambda: cross_entropy_with_logits(z, labels), {"z": z}


def check_model_gradients(seed=0, channels=4, input_size=16, batch=2,
                          mode="full", step=1e-6):
    """Finite-difference check of the full detector on a small batch.

    The default step is smaller than for the single-op checks: a 1e-5
    perturbation of a bias can push a relu input across its kink, which
    biases the central difference even when the backward pass is exact.

    Returns (max_relative_error, failures) over every weight entry.
    """
    config = ModelConfig(channels=channels, input_size=input_size, mode=mode)
    params = init_model_params(config, seed=seed)
    rng = np.random.default_rng(seed + 99)
    inputs = {br: Tensor(rng.uniform(0.1, 1.0, size=(batch, 3, input_size,
                                                     input_size)))
              for br in config.branch_names()}
    labels = rng.integers(0, 2, size=batch)

    def build():
        return cross_entropy_with_logits(
            model_forward(params, inputs, config), labels)

    return gradient_check(build, params, step=step, rtol=1e-4, atol=1e-7)
