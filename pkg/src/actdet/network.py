"""The detection model: 1D conv backbone, dual max/avg pooling pyramids,
shared classification and regression heads, and exact reverse-mode gradients.

Everything runs in float64 numpy. The input is zero-padded on the right to a
multiple of 2^(L-1) and every block re-masks padded positions, so valid
outputs are bit-identical regardless of how much padding is appended.
Pooling is mask-aware: max ignores invalid children, avg divides by the
count of valid children only.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, IoError, ShapeError

PYRAMID_MODES = ("max_plus_avg", "max_only", "avg_only")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    backbone_width: int = 256
    n_backbone_convs: int = 2
    kernel_size: int = 3
    n_pyramid_levels: int = 7
    head_width: int = 256
    n_head_convs: int = 2
    n_classes: int = 2
    pyramid_mode: str = "max_plus_avg"
    prior_prob: float = 0.01  # classification bias init target

    def __post_init__(self):
        if self.n_pyramid_levels < 1:
            raise ConfigError("need at least one pyramid level")
        if min(self.input_dim, self.backbone_width, self.head_width) < 1:
            raise ConfigError("widths must be positive")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")
        if self.pyramid_mode not in PYRAMID_MODES:
            raise ConfigError(f"unknown pyramid_mode {self.pyramid_mode!r}")
        if not (0 < self.prior_prob < 1):
            raise ConfigError("prior_prob must be in (0, 1)")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "backbone_width": self.backbone_width,
            "n_backbone_convs": self.n_backbone_convs,
            "kernel_size": self.kernel_size,
            "n_pyramid_levels": self.n_pyramid_levels,
            "head_width": self.head_width,
            "n_head_convs": self.n_head_convs,
            "n_classes": self.n_classes,
            "pyramid_mode": self.pyramid_mode,
            "prior_prob": self.prior_prob,
        }


@dataclass
class ModelParams:
    """Named parameter tensors with parallel gradient slots."""

    tensors: dict
    grads: dict

    @classmethod
    def from_tensors(cls, tensors: dict) -> "ModelParams":
        return cls(tensors, {k: np.zeros_like(v) for k, v in tensors.items()})

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0


@dataclass
class PyramidState:
    fused: list  # per level (width, length_l)
    max_branch: list
    avg_branch: list
    strides: list  # 2^(l-1) in level-1 grid units
    lengths: list
    valid_lengths: list


@dataclass
class HeadOutputs:
    """Per-level class logits and nonnegative offsets at valid moments.

    Offsets are in units of the level's stride; moment i at level l sits at
    level-1 grid coordinate i * stride_l.
    """

    logits: list  # per level (n_classes, valid_length_l)
    offsets: list  # per level (2, valid_length_l), softplus-mapped
    strides: list
    valid_lengths: list


# ---------------------------------------------------------------------------
# layer primitives: each forward returns (output, cache) and each backward
# consumes (cache, upstream) and returns input/parameter gradients


_MATMUL_BLOCK = 64


def _blocked_matmul(a, b):
    """a @ b computed in fixed-width column blocks of b.

    BLAS may pick different kernels for different matrix widths, producing
    bit-different results for the same column. Fixing the per-call shape
    makes each output column depend only on its own inputs, which the
    padding-invariance guarantee relies on.
    """
    n = b.shape[1]
    padded = -(-n // _MATMUL_BLOCK) * _MATMUL_BLOCK
    bp = np.zeros((b.shape[0], padded))
    bp[:, :n] = b
    out = np.empty((a.shape[0], padded))
    for j in range(0, padded, _MATMUL_BLOCK):
        out[:, j:j + _MATMUL_BLOCK] = a @ np.ascontiguousarray(
            bp[:, j:j + _MATMUL_BLOCK])
    return out[:, :n]


def conv1d_forward(x, w, b):
    cout, cin, k = w.shape
    t = x.shape[1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad)))
    cols = np.concatenate([xp[:, j:j + t] for j in range(k)], axis=0)
    w2 = w.transpose(0, 2, 1).reshape(cout, k * cin)
    y = _blocked_matmul(w2, cols) + b[:, None]
    return y, (cols, w2, x.shape)


def conv1d_backward(cache, gy, w):
    cols, w2, xshape = cache
    cout, cin, k = w.shape
    t = xshape[1]
    pad = k // 2
    gb = gy.sum(axis=1)
    gw = (gy @ cols.T).reshape(cout, k, cin).transpose(0, 2, 1)
    gcols = w2.T @ gy
    gxp = np.zeros((cin, t + 2 * pad))
    for j in range(k):
        gxp[:, j:j + t] += gcols[j * cin:(j + 1) * cin]
    return gxp[:, pad:pad + t], gw, gb


LN_EPS = 1e-5


def layernorm_forward(x, g, b):
    if x.shape[1] == 1:
        # single-column reductions use numpy's pairwise 1D path, which is
        # bit-different from the multi-column row-sequential path; pad so the
        # same codepath runs regardless of padded length
        y, (xh, inv, g) = layernorm_forward(np.pad(x, ((0, 0), (0, 1))), g, b)
        return y[:, :1], (xh[:, :1], inv[:1], g)
    mu = x.mean(axis=0)
    xc = x - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * inv
    y = g[:, None] * xh + b[:, None]
    return y, (xh, inv, g)


def layernorm_backward(cache, gy):
    xh, inv, g = cache
    gg = (gy * xh).sum(axis=1)
    gb = gy.sum(axis=1)
    gxh = gy * g[:, None]
    gx = inv[None, :] * (
        gxh - gxh.mean(axis=0)[None, :] - xh * (gxh * xh).mean(axis=0)[None, :]
    )
    return gx, gg, gb


def maxpool2_forward(x, valid_mask):
    c, t = x.shape
    x2 = x.reshape(c, t // 2, 2)
    vm2 = valid_mask.reshape(t // 2, 2)
    masked = np.where(vm2[None, :, :], x2, -np.inf)
    arg = masked.argmax(axis=2)
    out = np.take_along_axis(masked, arg[:, :, None], axis=2)[:, :, 0]
    any_valid = vm2.any(axis=1)
    out = np.where(any_valid[None, :], out, 0.0)
    return out, (arg, any_valid, x.shape)


def maxpool2_backward(cache, gy):
    arg, any_valid, xshape = cache
    c, t = xshape
    gx2 = np.zeros((c, t // 2, 2))
    np.put_along_axis(gx2, arg[:, :, None], (gy * any_valid[None, :])[:, :, None], axis=2)
    return gx2.reshape(c, t)


def avgpool2_forward(x, valid_mask):
    c, t = x.shape
    x2 = x.reshape(c, t // 2, 2)
    vm2 = valid_mask.reshape(t // 2, 2)
    cnt = vm2.sum(axis=1)
    denom = np.maximum(cnt, 1)
    out = (x2 * vm2[None, :, :]).sum(axis=2) / denom[None, :]
    return out, (vm2, denom, x.shape)


def avgpool2_backward(cache, gy):
    vm2, denom, xshape = cache
    c, t = xshape
    gx2 = (gy / denom[None, :])[:, :, None] * vm2[None, :, :]
    return gx2.reshape(c, t)


def softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------


def pyramid_geometry(n_steps: int, n_levels: int) -> tuple[list, list, list]:
    """(lengths, valid_lengths, strides) per level for a T-step input."""
    m = 2 ** (n_levels - 1)
    padded = ((n_steps + m - 1) // m) * m
    lengths, valids, strides = [padded], [n_steps], [1]
    for _ in range(1, n_levels):
        lengths.append(lengths[-1] // 2)
        valids.append((valids[-1] + 1) // 2)
        strides.append(strides[-1] * 2)
    return lengths, valids, strides


class Network:
    """Stateless compute graph for one ModelConfig; parameters live outside."""

    def __init__(self, config: ModelConfig):
        self.config = config

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed: int) -> ModelParams:
        cfg = self.config
        rng = np.random.default_rng([seed, 3])
        tensors = {}

        def conv(name, cin, cout, k):
            bound = 1.0 / np.sqrt(cin * k)
            tensors[f"{name}.w"] = rng.uniform(-bound, bound, size=(cout, cin, k))
            tensors[f"{name}.b"] = np.zeros(cout)

        def ln(name, width):
            tensors[f"{name}.g"] = np.ones(width)
            tensors[f"{name}.b"] = np.zeros(width)

        cin = cfg.input_dim
        for i in range(cfg.n_backbone_convs):
            conv(f"backbone.{i}.conv", cin, cfg.backbone_width, cfg.kernel_size)
            ln(f"backbone.{i}.ln", cfg.backbone_width)
            cin = cfg.backbone_width
        for head in ("cls", "reg"):
            cin = cfg.backbone_width
            for i in range(cfg.n_head_convs):
                conv(f"head.{head}.{i}.conv", cin, cfg.head_width, cfg.kernel_size)
                ln(f"head.{head}.{i}.ln", cfg.head_width)
                cin = cfg.head_width
        conv("head.cls.proj", cfg.head_width, cfg.n_classes, 1)
        conv("head.reg.proj", cfg.head_width, 2, 1)
        pi = cfg.prior_prob
        tensors["head.cls.proj.b"][:] = -np.log((1.0 - pi) / pi)
        return ModelParams.from_tensors(tensors)

    # -- forward ------------------------------------------------------------

    def forward(self, params: ModelParams, features: np.ndarray, pad_to: int = 0):
        """Run the model on a (T, D) feature matrix.

        Returns (PyramidState, HeadOutputs, cache); pass the cache to
        backward(). `pad_to` forces extra right padding (testing hook).
        """
        cfg = self.config
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != cfg.input_dim:
            raise ShapeError(
                f"expected (T, {cfg.input_dim}) features, got {feats.shape}"
            )
        n_steps = feats.shape[0]
        lengths, valids, strides = pyramid_geometry(n_steps, cfg.n_pyramid_levels)
        if pad_to:
            m = 2 ** (cfg.n_pyramid_levels - 1)
            if pad_to % m or pad_to < lengths[0]:
                raise ShapeError(f"pad_to={pad_to} incompatible with geometry")
            lengths = [pad_to >> l for l in range(cfg.n_pyramid_levels)]

        masks = [np.arange(lengths[l]) < valids[l] for l in range(cfg.n_pyramid_levels)]
        x = np.zeros((cfg.input_dim, lengths[0]))
        x[:, :n_steps] = feats.T
        cache = {"n_steps": n_steps, "lengths": lengths, "valids": valids,
                 "strides": strides, "masks": masks}

        x, cache["backbone"] = self._conv_stack(params, "backbone", x, masks[0],
                                                cfg.n_backbone_convs)

        z_max, z_avg = [x], [x]
        pool_caches = []
        for l in range(1, cfg.n_pyramid_levels):
            zm, cm = maxpool2_forward(z_max[-1], masks[l - 1])
            za, ca = avgpool2_forward(z_avg[-1], masks[l - 1])
            z_max.append(zm)
            z_avg.append(za)
            pool_caches.append((cm, ca))
        cache["pool"] = pool_caches

        if cfg.pyramid_mode == "max_plus_avg":
            fused = [m + a for m, a in zip(z_max, z_avg)]
        elif cfg.pyramid_mode == "max_only":
            fused = [m.copy() for m in z_max]
        else:
            fused = [a.copy() for a in z_avg]

        logits, offsets = [], []
        head_caches = []
        for l, z in enumerate(fused):
            hc = {}
            h, hc["cls_stack"] = self._conv_stack(params, "head.cls", z, masks[l],
                                                  cfg.n_head_convs)
            lg, hc["cls_proj"] = conv1d_forward(h, params.tensors["head.cls.proj.w"],
                                                params.tensors["head.cls.proj.b"])
            h, hc["reg_stack"] = self._conv_stack(params, "head.reg", z, masks[l],
                                                  cfg.n_head_convs)
            raw, hc["reg_proj"] = conv1d_forward(h, params.tensors["head.reg.proj.w"],
                                                 params.tensors["head.reg.proj.b"])
            hc["reg_raw"] = raw
            logits.append(lg[:, :valids[l]].copy())
            offsets.append(softplus(raw[:, :valids[l]]))
            head_caches.append(hc)
        cache["heads"] = head_caches
        cache["fused_inputs"] = fused

        state = PyramidState(fused, z_max, z_avg, strides, lengths, valids)
        outputs = HeadOutputs(logits, offsets, strides, valids)
        return state, outputs, cache

    def _conv_stack(self, params, prefix, x, mask, n_blocks):
        caches = []
        for i in range(n_blocks):
            w = params.tensors[f"{prefix}.{i}.conv.w"]
            b = params.tensors[f"{prefix}.{i}.conv.b"]
            y, c_conv = conv1d_forward(x, w, b)
            y, c_ln = layernorm_forward(y, params.tensors[f"{prefix}.{i}.ln.g"],
                                        params.tensors[f"{prefix}.{i}.ln.b"])
            relu_mask = (y > 0) & mask[None, :]
            x = y * relu_mask
            caches.append((c_conv, c_ln, relu_mask))
        return x, caches

    # -- backward -----------------------------------------------------------

    def backward(self, params: ModelParams, cache: dict, d_logits: list,
                 d_offsets: list) -> None:
        """Accumulate parameter gradients for upstream gradients on the
        valid-position head outputs. Gradients add into params.grads."""
        cfg = self.config
        lengths, valids, masks = cache["lengths"], cache["valids"], cache["masks"]
        n_levels = cfg.n_pyramid_levels
        d_fused = [np.zeros((cfg.backbone_width, lengths[l])) for l in range(n_levels)]

        for l in range(n_levels):
            hc = cache["heads"][l]
            glg = np.zeros((cfg.n_classes, lengths[l]))
            glg[:, :valids[l]] = d_logits[l]
            graw = np.zeros((2, lengths[l]))
            graw[:, :valids[l]] = d_offsets[l] * sigmoid(hc["reg_raw"][:, :valids[l]])

            gh, gw, gb = conv1d_backward(hc["cls_proj"], glg,
                                         params.tensors["head.cls.proj.w"])
            params.grads["head.cls.proj.w"] += gw
            params.grads["head.cls.proj.b"] += gb
            d_fused[l] += self._conv_stack_backward(params, "head.cls",
                                                    hc["cls_stack"], gh)

            gh, gw, gb = conv1d_backward(hc["reg_proj"], graw,
                                         params.tensors["head.reg.proj.w"])
            params.grads["head.reg.proj.w"] += gw
            params.grads["head.reg.proj.b"] += gb
            d_fused[l] += self._conv_stack_backward(params, "head.reg",
                                                    hc["reg_stack"], gh)

        use_max = cfg.pyramid_mode in ("max_plus_avg", "max_only")
        use_avg = cfg.pyramid_mode in ("max_plus_avg", "avg_only")
        d_max = [d.copy() if use_max else np.zeros_like(d) for d in d_fused]
        d_avg = [d.copy() if use_avg else np.zeros_like(d) for d in d_fused]
        for l in range(n_levels - 1, 0, -1):
            cm, ca = cache["pool"][l - 1]
            if use_max:
                d_max[l - 1] += maxpool2_backward(cm, d_max[l])
            if use_avg:
                d_avg[l - 1] += avgpool2_backward(ca, d_avg[l])
        d_z1 = d_max[0] + d_avg[0]

        self._conv_stack_backward(params, "backbone", cache["backbone"], d_z1)

    def _conv_stack_backward(self, params, prefix, caches, gy):
        for i in range(len(caches) - 1, -1, -1):
            c_conv, c_ln, relu_mask = caches[i]
            gy = gy * relu_mask
            gy, gg, gb = layernorm_backward(c_ln, gy)
            params.grads[f"{prefix}.{i}.ln.g"] += gg
            params.grads[f"{prefix}.{i}.ln.b"] += gb
            gy, gw, gb = conv1d_backward(c_conv, gy, params.tensors[f"{prefix}.{i}.conv.w"])
            params.grads[f"{prefix}.{i}.conv.w"] += gw
            params.grads[f"{prefix}.{i}.conv.b"] += gb
        return gy


# ---------------------------------------------------------------------------
# checkpoint format: "ACKP" | u32 version | u32 meta_len | meta JSON |
# u32 n_tensors | per tensor: u16 name_len, name, u8 ndim, u32*ndim, f32 data

CKPT_MAGIC = b"ACKP"
CKPT_VERSION = 1


def save_checkpoint(params: ModelParams, meta: dict, path) -> None:
    buf = io.BytesIO()
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(meta_blob)))
    buf.write(meta_blob)
    names = sorted(params.tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    view = memoryview(blob)
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    try:
        meta = json.loads(bytes(view[off:off + meta_len]))
        off += meta_len
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = bytes(view[off:off + nlen]).decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(view[off:off + 4 * size], dtype="<f4")
            if arr.size != size:
                raise FormatError(f"{path}: truncated tensor {name!r}")
            off += 4 * size
            tensors[name] = arr.reshape(shape).astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return ModelParams.from_tensors(tensors), meta
