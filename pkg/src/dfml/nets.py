"""Small classifier architectures with explicit, named parameters.

Networks are represented as ordered name->tensor maps instead of
nn.Modules so that gradient-based inner loops can produce adapted
parameter sets functionally (keeping second-order autograd graphs), and
so that frozen models are plain immutable values.

Two architectures are provided:

* ``conv4`` -- four blocks of (3x3 conv -> batch norm -> ReLU -> 2x2 max
  pool), 32*width filters per block, global average pooling, linear head.
* ``resnet8`` -- a narrow residual net used only to exercise architecture
  heterogeneity.
"""

import zipfile
from collections import OrderedDict
from dataclasses import dataclass
from typing import List

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataIOError, InputError
from .seeding import make_generator

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CKPT_FORMAT_VERSION = "purer-ckpt-v1"

_ARCHS = ("conv4", "resnet8")


@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    input_shape: tuple  # (C, H, W)
    num_classes: int
    width_multiplier: float = 1.0

    def __post_init__(self):
        if self.arch_id not in _ARCHS:
            raise ConfigError(f"unknown arch_id {self.arch_id!r}; expected one of {_ARCHS}")
        if len(self.input_shape) != 3 or any(int(d) < 1 for d in self.input_shape):
            raise ConfigError(f"bad input_shape {self.input_shape!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))


@dataclass
class NetworkParams:
    """Trainable entries plus non-trainable BN buffers, both name-ordered."""
    spec: ArchSpec
    entries: "OrderedDict[str, torch.Tensor]"
    buffers: "OrderedDict[str, torch.Tensor]"

    def clone(self) -> "NetworkParams":
        return NetworkParams(
            self.spec,
            OrderedDict((k, v.detach().clone()) for k, v in self.entries.items()),
            OrderedDict((k, v.detach().clone()) for k, v in self.buffers.items()),
        )

    def to_dtype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            self.spec,
            OrderedDict((k, v.detach().clone().to(dtype)) for k, v in self.entries.items()),
            OrderedDict((k, v.detach().clone().to(dtype)) for k, v in self.buffers.items()),
        )

    def requires_grad_(self, flag=True) -> "NetworkParams":
        for v in self.entries.values():
            v.requires_grad_(flag)
        return self

    def checksum(self) -> str:
        import hashlib
        h = hashlib.blake2b(digest_size=16)
        for d in (self.entries, self.buffers):
            for k, v in d.items():
                h.update(k.encode())
                h.update(v.detach().to(torch.float64).numpy().tobytes())
        return h.hexdigest()

    def bn_prefixes(self) -> List[str]:
        """Ordered BN layer names, derived from buffer keys."""
        out = []
        for k in self.buffers:
            if k.endswith(".running_mean"):
                out.append(k[: -len(".running_mean")])
        return out


@dataclass
class ForwardTrace:
    logits: torch.Tensor
    per_bn_layer_batch_mean: List[torch.Tensor]
    per_bn_layer_batch_variance: List[torch.Tensor]
    embedding: torch.Tensor


def _conv_init(gen, out_c, in_c, k=3):
    fan_in = in_c * k * k
    w = torch.randn(out_c, in_c, k, k, generator=gen) * (2.0 / fan_in) ** 0.5
    b = torch.zeros(out_c)
    return w, b


def _bn_init(c):
    return torch.ones(c), torch.zeros(c), torch.zeros(c), torch.ones(c)


def _conv4_channels(spec: ArchSpec) -> int:
    c = int(round(32 * spec.width_multiplier))
    return max(c, 1)


def _resnet8_channels(spec: ArchSpec):
    base = max(int(round(16 * spec.width_multiplier)), 1)
    return base, 2 * base, 4 * base


def build_network(spec: ArchSpec, rng_seed: int) -> NetworkParams:
    """Deterministically initialize a network for ``spec``.

    BN buffers start at running_mean=0, running_var=1.
    """
    gen = make_generator(rng_seed)
    entries: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    buffers: "OrderedDict[str, torch.Tensor]" = OrderedDict()

    def add_bn(prefix, c):
        g, b, rm, rv = _bn_init(c)
        entries[f"{prefix}.weight"] = g
        entries[f"{prefix}.bias"] = b
        buffers[f"{prefix}.running_mean"] = rm
        buffers[f"{prefix}.running_var"] = rv

    in_c = spec.input_shape[0]
    if spec.arch_id == "conv4":
        c = _conv4_channels(spec)
        prev = in_c
        for i in range(4):
            w, b = _conv_init(gen, c, prev)
            entries[f"block{i}.conv.weight"] = w
            entries[f"block{i}.conv.bias"] = b
            add_bn(f"block{i}.bn", c)
            prev = c
        feat = c
    else:  # resnet8
        c1, c2, c3 = _resnet8_channels(spec)
        w, b = _conv_init(gen, c1, in_c)
        entries["stem.conv.weight"] = w
        entries["stem.conv.bias"] = b
        add_bn("stem.bn", c1)
        chans = [c1, c2, c3]
        prev = c1
        for j, c in enumerate(chans):
            for leg in (1, 2):
                ic = prev if leg == 1 else c
                w, b = _conv_init(gen, c, ic)
                entries[f"res{j}.conv{leg}.weight"] = w
                entries[f"res{j}.conv{leg}.bias"] = b
                add_bn(f"res{j}.bn{leg}", c)
            if prev != c:
                w, b = _conv_init(gen, c, prev, k=1)
                entries[f"res{j}.down.weight"] = w
                entries[f"res{j}.down.bias"] = b
                add_bn(f"res{j}.downbn", c)
            prev = c
        feat = c3

    hw = torch.randn(spec.num_classes, feat, generator=gen) / feat ** 0.5
    entries["head.weight"] = hw
    entries["head.bias"] = torch.zeros(spec.num_classes)
    return NetworkParams(spec, entries, buffers)


def feature_dim(spec: ArchSpec) -> int:
    if spec.arch_id == "conv4":
        return _conv4_channels(spec)
    return _resnet8_channels(spec)[2]


def head_keys() -> tuple:
    return ("head.weight", "head.bias")


def _bn_apply(x, params, buffers, prefix, bn_mode, update_buffers, trace_mu, trace_var):
    mu = x.mean(dim=(0, 2, 3))
    var = x.var(dim=(0, 2, 3), unbiased=False)
    trace_mu.append(mu)
    trace_var.append(var)
    if bn_mode == "batch_stats":
        norm_mu, norm_var = mu, var
    else:
        norm_mu = buffers[f"{prefix}.running_mean"]
        norm_var = buffers[f"{prefix}.running_var"]
    if update_buffers:
        with torch.no_grad():
            buffers[f"{prefix}.running_mean"].mul_(1 - BN_MOMENTUM).add_(mu.detach(), alpha=BN_MOMENTUM)
            buffers[f"{prefix}.running_var"].mul_(1 - BN_MOMENTUM).add_(var.detach(), alpha=BN_MOMENTUM)
    xn = (x - norm_mu[None, :, None, None]) / torch.sqrt(norm_var[None, :, None, None] + BN_EPS)
    return xn * params[f"{prefix}.weight"][None, :, None, None] + params[f"{prefix}.bias"][None, :, None, None]


def _pool_if_possible(x):
    if x.shape[-1] >= 2 and x.shape[-2] >= 2:
        return F.max_pool2d(x, 2)
    return x


def forward(params: NetworkParams, images: torch.Tensor, bn_mode: str,
            update_buffers: bool = False) -> ForwardTrace:
    """Run the network, recording batch statistics at every BN layer.

    ``bn_mode`` selects which statistics normalize activations
    (``batch_stats`` or ``running_stats``); the recorded statistics are
    always the measured batch ones. ``update_buffers`` folds batch
    statistics into the running buffers (EMA, momentum 0.1) and must only
    be used on parameter sets the caller owns exclusively.
    """
    if bn_mode not in ("batch_stats", "running_stats"):
        raise InputError(f"unknown bn_mode {bn_mode!r}")
    if images.dim() != 4:
        raise InputError(f"expected [B,C,H,W] input, got shape {tuple(images.shape)}")
    spec = params.spec
    if tuple(images.shape[1:]) != spec.input_shape:
        raise InputError(
            f"image shape {tuple(images.shape[1:])} does not match spec {spec.input_shape}")
    if images.shape[0] < 1:
        raise InputError("empty batch")
    if bn_mode == "batch_stats" and images.shape[0] < 2:
        raise InputError("batch_stats mode requires batch size >= 2")

    p, b = params.entries, params.buffers
    mus: List[torch.Tensor] = []
    vars_: List[torch.Tensor] = []
    x = images
    if spec.arch_id == "conv4":
        for i in range(4):
            x = F.conv2d(x, p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"], padding=1)
            x = _bn_apply(x, p, b, f"block{i}.bn", bn_mode, update_buffers, mus, vars_)
            x = F.relu(x)
            x = _pool_if_possible(x)
    else:
        x = F.conv2d(x, p["stem.conv.weight"], p["stem.conv.bias"], padding=1)
        x = _bn_apply(x, p, b, "stem.bn", bn_mode, update_buffers, mus, vars_)
        x = F.relu(x)
        for j in range(3):
            stride = 1 if j == 0 else 2
            out = F.conv2d(x, p[f"res{j}.conv1.weight"], p[f"res{j}.conv1.bias"],
                           stride=stride, padding=1)
            out = _bn_apply(out, p, b, f"res{j}.bn1", bn_mode, update_buffers, mus, vars_)
            out = F.relu(out)
            out = F.conv2d(out, p[f"res{j}.conv2.weight"], p[f"res{j}.conv2.bias"], padding=1)
            out = _bn_apply(out, p, b, f"res{j}.bn2", bn_mode, update_buffers, mus, vars_)
            if f"res{j}.down.weight" in p:
                skip = F.conv2d(x, p[f"res{j}.down.weight"], p[f"res{j}.down.bias"], stride=stride)
                skip = _bn_apply(skip, p, b, f"res{j}.downbn", bn_mode, update_buffers, mus, vars_)
            else:
                skip = x
            x = F.relu(out + skip)

    emb = x.mean(dim=(2, 3))
    logits = emb @ p["head.weight"].t() + p["head.bias"]
    return ForwardTrace(logits, mus, vars_, emb)


# --- checkpoint archive -------------------------------------------------

def _array_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().to(torch.float32).numpy()
    header = "float32 " + ",".join(str(d) for d in arr.shape) + "\n"
    return header.encode("ascii") + arr.astype("<f4").tobytes()


def _array_from_bytes(raw: bytes) -> torch.Tensor:
    nl = raw.index(b"\n")
    header = raw[:nl].decode("ascii").split()
    if header[0] != "float32":
        raise DataIOError(f"unsupported dtype {header[0]!r} in checkpoint array")
    shape = tuple(int(d) for d in header[1].split(",")) if header[1] else ()
    arr = np.frombuffer(raw[nl + 1:], dtype="<f4").reshape(shape).copy()
    return torch.from_numpy(arr)


def save_checkpoint(params: NetworkParams, path) -> None:
    """Write a single-archive checkpoint (format ``purer-ckpt-v1``)."""
    spec = params.spec
    arch_txt = (f"arch_id={spec.arch_id}\n"
                f"input_shape={','.join(str(d) for d in spec.input_shape)}\n"
                f"num_classes={spec.num_classes}\n"
                f"width_multiplier={spec.width_multiplier!r}\n")
    def write(zf, name, data):
        # fixed timestamp keeps archive bytes deterministic
        zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), data)

    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        write(zf, "format", CKPT_FORMAT_VERSION)
        write(zf, "arch.txt", arch_txt)
        for name, t in params.entries.items():
            write(zf, f"param/{name}", _array_bytes(t))
        for name, t in params.buffers.items():
            write(zf, f"buffer/{name}", _array_bytes(t))


def load_checkpoint(path) -> NetworkParams:
    try:
        zf = zipfile.ZipFile(path, "r")
    except (FileNotFoundError, zipfile.BadZipFile) as exc:
        raise DataIOError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        names = set(zf.namelist())
        if "format" not in names or zf.read("format").decode() != CKPT_FORMAT_VERSION:
            raise DataIOError(f"{path} is not a {CKPT_FORMAT_VERSION} checkpoint")
        kv = {}
        for line in zf.read("arch.txt").decode().splitlines():
            if line.strip():
                k, v = line.split("=", 1)
                kv[k] = v
        spec = ArchSpec(
            arch_id=kv["arch_id"],
            input_shape=tuple(int(d) for d in kv["input_shape"].split(",")),
            num_classes=int(kv["num_classes"]),
            width_multiplier=float(kv["width_multiplier"]),
        )
        entries: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        buffers: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        # rebuild a reference net to recover canonical key order
        ref = build_network(spec, 0)
        for name in ref.entries:
            entries[name] = _array_from_bytes(zf.read(f"param/{name}"))
        for name in ref.buffers:
            buffers[name] = _array_from_bytes(zf.read(f"buffer/{name}"))
    return NetworkParams(spec, entries, buffers)
