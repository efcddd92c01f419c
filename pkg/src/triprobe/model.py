"""Reference triplet classifier: backbone, component encoder, triplet decoder.

The backbone is three stride-2 conv blocks.  The instrument encoder is a
bias-free 1x1 conv whose per-class activation maps double as CAMs; global
average pooling of those maps gives the instrument logits, so the CAM used
for visualisation is exactly the evidence the instrument head sums.  Verb
and target branches read the backbone features concatenated with the CAMs.
The decoder is a dense layer over [pooled backbone features, y_I, y_V, y_T]
emitting the triplet logits.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class CheckpointError(IOError):
    """Corrupt, truncated, or mismatched checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 112
    in_channels: int = 3
    conv_widths: tuple = (8, 16, 32)
    branch_width: int = 16
    n_instruments: int = 6
    n_verbs: int = 10
    n_targets: int = 15
    n_triplets: int = 100
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(self.conv_widths))
        if self.height % 8 or self.width % 8:
            raise ValueError("input height/width must be divisible by 8 (three stride-2 blocks)")
        if len(self.conv_widths) != 3:
            raise ValueError("conv_widths must list three block widths")

    @property
    def cam_shape(self):
        return (self.height // 8, self.width // 8)

    def hash(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class ModelOutput:
    """All heads of one forward pass, still on the tape."""

    y_i: Tensor
    y_v: Tensor
    y_t: Tensor
    y_ivt: Tensor
    cams: Tensor
    x: Tensor
    param_tensors: dict | None = None

    def head(self, name: str) -> Tensor:
        return {"I": self.y_i, "V": self.y_v, "T": self.y_t, "IVT": self.y_ivt}[name]


def init_params(config: ModelConfig) -> dict:
    """He-style seeded initialisation; keys are grouped by dotted prefix."""
    rng = np.random.Generator(np.random.PCG64(config.init_seed))
    w1, w2, w3 = config.conv_widths
    bw = config.branch_width
    cin = config.in_channels

    def conv(kh, kw, ci, co):
        std = np.sqrt(2.0 / (kh * kw * ci))
        return (rng.standard_normal((kh, kw, ci, co)) * std).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def head(ci, co):
        std = np.sqrt(1.0 / ci)
        return (rng.standard_normal((ci, co)) * std).astype(np.float32)

    vb_in = w3 + config.n_instruments
    dec_in = w3 + config.n_instruments + config.n_verbs + config.n_targets
    return {
        "backbone.conv1.w": conv(3, 3, cin, w1),
        "backbone.conv1.b": zeros(w1),
        "backbone.conv2.w": conv(3, 3, w1, w2),
        "backbone.conv2.b": zeros(w2),
        "backbone.conv3.w": conv(3, 3, w2, w3),
        "backbone.conv3.b": zeros(w3),
        "encoder.cam.w": conv(1, 1, w3, config.n_instruments),
        "encoder.verb.conv.w": conv(1, 1, vb_in, bw),
        "encoder.verb.conv.b": zeros(bw),
        "encoder.verb.head.w": head(bw, config.n_verbs),
        "encoder.verb.head.b": zeros(config.n_verbs),
        "encoder.target.conv.w": conv(1, 1, vb_in, bw),
        "encoder.target.conv.b": zeros(bw),
        "encoder.target.head.w": head(bw, config.n_targets),
        "encoder.target.head.b": zeros(config.n_targets),
        "decoder.head.w": head(dec_in, config.n_triplets),
        "decoder.head.b": zeros(config.n_triplets),
    }


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


def forward(params: dict, x, config: ModelConfig, *, requires_input_grad=False,
            requires_param_grad=False, cam_feed_scale: float = 1.0) -> ModelOutput:
    """Run the network on a (N, H, W, C) batch and return all heads.

    cam_feed_scale multiplies the CAMs seen by the verb/target branches
    only; the instrument head always pools the unscaled maps.
    """
    if isinstance(x, Tensor):
        xt = x
    else:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        xt = Tensor(x.astype(np.float32, copy=False), requires_grad=requires_input_grad)
    if xt.data.ndim != 4 or xt.data.shape[1:] != (config.height, config.width, config.in_channels):
        raise ad.ShapeError(
            f"input shape {xt.data.shape} does not match configured "
            f"(N, {config.height}, {config.width}, {config.in_channels})")

    p = {k: Tensor(v, requires_grad=requires_param_grad) for k, v in params.items()}

    f = ad.relu(ad.conv2d(xt, p["backbone.conv1.w"], p["backbone.conv1.b"], stride=2, padding=1))
    f = ad.relu(ad.conv2d(f, p["backbone.conv2.w"], p["backbone.conv2.b"], stride=2, padding=1))
    f = ad.relu(ad.conv2d(f, p["backbone.conv3.w"], p["backbone.conv3.b"], stride=2, padding=1))

    cams = ad.conv2d(f, p["encoder.cam.w"])
    y_i = ad.global_avg_pool(cams)

    feed = cams if cam_feed_scale == 1.0 else ad.scale(cams, cam_feed_scale)
    branch_in = ad.concat_channels([f, feed])
    vb = ad.relu(ad.conv2d(branch_in, p["encoder.verb.conv.w"], p["encoder.verb.conv.b"]))
    y_v = ad.dense(ad.global_avg_pool(vb), p["encoder.verb.head.w"], p["encoder.verb.head.b"])
    tb = ad.relu(ad.conv2d(branch_in, p["encoder.target.conv.w"], p["encoder.target.conv.b"]))
    y_t = ad.dense(ad.global_avg_pool(tb), p["encoder.target.head.w"], p["encoder.target.head.b"])

    dec_in = ad.concat_channels([ad.global_avg_pool(f), y_i, y_v, y_t])
    y_ivt = ad.dense(dec_in, p["decoder.head.w"], p["decoder.head.b"])

    return ModelOutput(y_i=y_i, y_v=y_v, y_t=y_t, y_ivt=y_ivt, cams=cams, x=xt,
                       param_tensors=p)


def predict_label(output: ModelOutput) -> np.ndarray:
    """argmax over the triplet logits, ties to the lowest index."""
    return np.argmax(output.y_ivt.data, axis=-1)


def grad_wrt_input(params: dict, x, config: ModelConfig, selector) -> np.ndarray:
    """Gradient of one scalar head entry w.r.t. the input image.

    selector is (head, class_index) with head in {"I","V","T","IVT"};
    x is a single (H, W, C) image.
    """
    head, cls = selector
    out = forward(params, x, config, requires_input_grad=True)
    logits = out.head(head)
    if not 0 <= int(cls) < logits.data.shape[-1]:
        raise IndexError(f"class {cls} out of range for head {head}")
    ad.backward(ad.select_index(logits, np.array([int(cls)])))
    g = out.x.grad
    return g[0] if np.asarray(x).ndim == 3 else g


class TripletNet:
    """Parameter bundle + config with batched inference/gradient helpers.

    The gradient helpers below are the protocol the explainers and the
    perturbation search consume; LinearModel implements the same three
    methods in closed form.
    """

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    @property
    def n_classes(self) -> int:
        return self.config.n_triplets

    def output(self, X) -> ModelOutput:
        return forward(self.params, X, self.config)

    def logits_batch(self, X) -> np.ndarray:
        return self.output(X).y_ivt.data.copy()

    def heads_batch(self, X) -> dict:
        out = self.output(X)
        return {"I": out.y_i.data.copy(), "V": out.y_v.data.copy(),
                "T": out.y_t.data.copy(), "IVT": out.y_ivt.data.copy()}

    def predict_batch(self, X) -> np.ndarray:
        return predict_label(self.output(X))

    def grad_logit_batch(self, X, class_idx) -> np.ndarray:
        """d y_IVT[n, class_idx[n]] / d X[n] for every row n."""
        out = forward(self.params, X, self.config, requires_input_grad=True)
        n = out.y_ivt.data.shape[0]
        idx = np.broadcast_to(np.asarray(class_idx, dtype=np.intp), (n,))
        ad.backward(ad.reduce_sum(ad.select_index(out.y_ivt, idx)))
        return out.x.grad.copy()

    def grad_margin_batch(self, X, plus_idx, minus_idx) -> np.ndarray:
        """d (y_IVT[n, plus[n]] - y_IVT[n, minus[n]]) / d X[n] per row."""
        out = forward(self.params, X, self.config, requires_input_grad=True)
        n = out.y_ivt.data.shape[0]
        plus = np.broadcast_to(np.asarray(plus_idx, dtype=np.intp), (n,))
        minus = np.broadcast_to(np.asarray(minus_idx, dtype=np.intp), (n,))
        margin = ad.sub(ad.select_index(out.y_ivt, plus), ad.select_index(out.y_ivt, minus))
        ad.backward(ad.reduce_sum(margin))
        return out.x.grad.copy()

    def margin_and_grad(self, X, y):
        """Flip margin max_{m != y} z_m - z_y and its input gradient, from
        one forward graph."""
        out = forward(self.params, X, self.config, requires_input_grad=True)
        logits = out.y_ivt.data
        n = logits.shape[0]
        masked = logits.copy()
        rows = np.arange(n)
        masked[rows, y] = -np.inf
        comp = masked.argmax(axis=1)
        margin_t = ad.sub(ad.select_index(out.y_ivt, comp), ad.select_index(out.y_ivt, y))
        ad.backward(ad.reduce_sum(margin_t))
        return logits[rows, comp] - logits[rows, y], out.x.grad.copy()

    def cam_feature_weights(self) -> np.ndarray:
        """(backbone_channels, n_instruments) weights of the CAM 1x1 conv."""
        return self.params["encoder.cam.w"][0, 0]


class LinearModel:
    """Flat linear logits over the raw input; diagnostic stub with closed-form
    minimum-perturbation distances, exposed through the same protocol."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)  # (D, C)
        self.bias = np.asarray(bias, dtype=np.float64)  # (C,)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ad.ShapeError("LinearModel: weights (D, C) and bias (C,) required")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]

    def _flat(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X.reshape(X.shape[0], -1), X.shape

    def logits_batch(self, X) -> np.ndarray:
        flat, _ = self._flat(X)
        return flat @ self.weights + self.bias

    def predict_batch(self, X) -> np.ndarray:
        return np.argmax(self.logits_batch(X), axis=-1)

    def grad_logit_batch(self, X, class_idx) -> np.ndarray:
        flat, shape = self._flat(X)
        idx = np.broadcast_to(np.asarray(class_idx, dtype=np.intp), (flat.shape[0],))
        return self.weights.T[idx].reshape(shape)

    def grad_margin_batch(self, X, plus_idx, minus_idx) -> np.ndarray:
        flat, shape = self._flat(X)
        n = flat.shape[0]
        plus = np.broadcast_to(np.asarray(plus_idx, dtype=np.intp), (n,))
        minus = np.broadcast_to(np.asarray(minus_idx, dtype=np.intp), (n,))
        return (self.weights.T[plus] - self.weights.T[minus]).reshape(shape)

    def margin_and_grad(self, X, y):
        logits = self.logits_batch(X)
        n = logits.shape[0]
        rows = np.arange(n)
        masked = logits.copy()
        masked[rows, y] = -np.inf
        comp = masked.argmax(axis=1)
        grad = self.grad_margin_batch(X, comp, y)
        return logits[rows, comp] - logits[rows, y], grad


# ---------------------------------------------------------------------------
# checkpoint file: little-endian, magic/version/config header, CRC32 trailer

_MAGIC = b"TPCK"
_VERSION = 1
_DTYPES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(params: dict, config: ModelConfig, path) -> None:
    body = bytearray()
    body += _MAGIC
    body += struct.pack("<I", _VERSION)
    body += config.hash()
    cfg_blob = json.dumps(asdict(config), sort_keys=True).encode()
    body += struct.pack("<I", len(cfg_blob))
    body += cfg_blob
    names = sorted(params)
    body += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(params[name])
        nb = name.encode()
        body += struct.pack("<H", len(nb))
        body += nb
        body += struct.pack("<BB", _DTYPES[arr.dtype], arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype("<" + arr.dtype.str[1:], copy=False).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path, config: ModelConfig | None = None):
    """Read a checkpoint; returns (params, config stored in the file).

    Verifies the CRC32 trailer and, when a config is supplied, its hash
    against the one recorded at save time.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 + 32 + 4 + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    crc_stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    off = 0

    def pull(n):
        nonlocal off
        if off + n > len(blob) - 4:
            raise CheckpointError(f"{path}: truncated checkpoint body")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if pull(4) != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack("<I", pull(4))[0]
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stored_hash = pull(32)
    cfg_len = struct.unpack("<I", pull(4))[0]
    stored_cfg = ModelConfig(**json.loads(pull(cfg_len).decode()))
    if config is not None and config.hash() != stored_hash:
        raise CheckpointError(f"{path}: checkpoint was saved for a different model config")
    n_tensors = struct.unpack("<I", pull(4))[0]
    params = {}
    for _ in range(n_tensors):
        name_len = struct.unpack("<H", pull(2))[0]
        name = pull(name_len).decode()
        dt_code, ndim = struct.unpack("<BB", pull(2))
        shape = struct.unpack(f"<{ndim}I", pull(4 * ndim))
        dtype = _DTYPES_INV[dt_code]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(pull(count * dtype.itemsize), dtype="<" + dtype.str[1:])
        params[name] = arr.reshape(shape).astype(dtype)
    return params, stored_cfg
