"""Split classifiers (feature extractor + head), flat parameter views, masks, checkpoints."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

_PARAM_MAGIC = b"NTPW"
_MASK_MAGIC = b"NTPM"
_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.int64, "<i8")}


class SplitClassifier(nn.Module):
    """``forward(x) = classifier(feature_extractor(x))`` on NCHW float tensors."""

    def __init__(self, feature_extractor: nn.Module, classifier: nn.Module, feature_dim: int,
                 arch: str = "custom", input_shape: tuple = (32, 32, 3), num_classes: int = 10):
        super().__init__()
        self.feature_extractor = feature_extractor
        self.classifier = classifier
        self.feature_dim = feature_dim
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.mask: SparsityMask | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.feature_extractor(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_extractor(x)

    def prunable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        """Weight matrices/kernels of the feature extractor; biases and norms excluded."""
        return [(f"feature_extractor.{n}", p) for n, p in self.feature_extractor.named_parameters()
                if p.dim() >= 2]

    def prunable_vector(self) -> "ParameterVector":
        return ParameterVector.from_parameters(self.prunable_parameters())

    def load_prunable_vector(self, vec: "ParameterVector | torch.Tensor") -> None:
        values = vec.values if isinstance(vec, ParameterVector) else vec
        with torch.no_grad():
            offset = 0
            for _, p in self.prunable_parameters():
                k = p.numel()
                p.copy_(values[offset:offset + k].view_as(p))
                offset += k
        if offset != values.numel():
            raise ValueError(f"vector has {values.numel()} entries, model expects {offset}")


@dataclass
class ParameterVector:
    """Flat copy of a parameter collection plus the layout needed to undo it."""

    names: list[str]
    shapes: list[tuple[int, ...]]
    values: torch.Tensor

    @classmethod
    def from_parameters(cls, named: Iterable[tuple[str, torch.Tensor]]) -> "ParameterVector":
        named = list(named)
        vals = [p.detach().reshape(-1).clone() for _, p in named]
        flat = torch.cat(vals) if vals else torch.zeros(0)
        return cls([n for n, _ in named], [tuple(p.shape) for _, p in named], flat)

    def unflatten(self) -> dict[str, torch.Tensor]:
        out, offset = {}, 0
        for name, shape in zip(self.names, self.shapes):
            k = int(np.prod(shape)) if shape else 1
            out[name] = self.values[offset:offset + k].view(shape).clone()
            offset += k
        return out

    def __len__(self) -> int:
        return int(self.values.numel())

    def with_values(self, values: torch.Tensor) -> "ParameterVector":
        if values.numel() != len(self):
            raise ValueError("length mismatch")
        return ParameterVector(list(self.names), list(self.shapes), values)


@dataclass
class SparsityMask:
    keep: torch.Tensor  # bool, True = weight survives
    scope: str = "feature_extractor"

    def __post_init__(self):
        self.keep = torch.as_tensor(self.keep).reshape(-1).to(torch.bool)

    def __len__(self) -> int:
        return int(self.keep.numel())

    @property
    def sparsity(self) -> float:
        n = len(self)
        if n == 0:
            raise ValueError("empty mask")
        return 1.0 - int(self.keep.sum()) / n

    @classmethod
    def ones(cls, n: int) -> "SparsityMask":
        return cls(torch.ones(n, dtype=torch.bool))

    @classmethod
    def from_support(cls, values: torch.Tensor) -> "SparsityMask":
        return cls(values.reshape(-1) != 0)


@dataclass
class FeatureBatch:
    z: torch.Tensor
    y: torch.Tensor
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z = torch.as_tensor(self.z)
        if self.z.dim() == 1:
            self.z = self.z[:, None]
        self.y = to_labels(self.y).reshape(-1)
        if self.z.shape[0] != self.y.shape[0]:
            raise ValueError("features and labels disagree on batch size")


def density(params) -> float:
    """Fraction of entries that are exactly nonzero (no tolerance)."""
    if isinstance(params, ParameterVector):
        params = params.values
    if isinstance(params, torch.Tensor):
        n = params.numel()
        nz = int(torch.count_nonzero(params))
    else:
        arr = np.asarray(params)
        n = arr.size
        nz = int(np.count_nonzero(arr))
    if n == 0:
        raise ValueError("density of an empty vector is undefined")
    return nz / n


# ---------------------------------------------------------------- architectures

def _flat_dim(module: nn.Module, input_shape) -> int:
    h, w, c = input_shape
    with torch.no_grad():
        return int(module(torch.zeros(1, c, h, w)).reshape(1, -1).shape[1])


def small_cnn(num_classes: int = 10, input_shape=(32, 32, 3), feature_dim: int = 48) -> SplitClassifier:
    h, w, c = input_shape
    convs = nn.Sequential(
        nn.Conv2d(c, 8, 3, padding=1), nn.BatchNorm2d(8), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(8, 16, 3, padding=1), nn.BatchNorm2d(16), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(),
    )
    flat = _flat_dim(convs.eval(), input_shape)
    fe = nn.Sequential(*convs, nn.Linear(flat, feature_dim), nn.BatchNorm1d(feature_dim), nn.ReLU())
    return SplitClassifier(fe, nn.Linear(feature_dim, num_classes), feature_dim,
                           "small_cnn", input_shape, num_classes)


def micro_cnn(num_classes: int = 10, input_shape=(8, 8, 3), feature_dim: int = 12) -> SplitClassifier:
    """A few-thousand-parameter net for finite-difference checks."""
    h, w, c = input_shape
    convs = nn.Sequential(nn.Conv2d(c, 4, 3, padding=1), nn.Tanh(), nn.AvgPool2d(2), nn.Flatten())
    flat = _flat_dim(convs, input_shape)
    fe = nn.Sequential(*convs, nn.Linear(flat, feature_dim), nn.Tanh())
    return SplitClassifier(fe, nn.Linear(feature_dim, num_classes), feature_dim,
                           "micro_cnn", input_shape, num_classes)


_VGG11 = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")


def vgg11(num_classes: int = 10, input_shape=(32, 32, 3)) -> SplitClassifier:
    h, w, c = input_shape
    layers, ch = [], c
    for v in _VGG11:
        if v == "M":
            layers.append(nn.MaxPool2d(2))
        else:
            layers += [nn.Conv2d(ch, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
            ch = v
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return SplitClassifier(nn.Sequential(*layers), nn.Linear(512, num_classes), 512,
                           "vgg11", input_shape, num_classes)


class _BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = nn.Sequential()
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.short(x))


def resnet18(num_classes: int = 10, input_shape=(32, 32, 3)) -> SplitClassifier:
    h, w, c = input_shape
    layers = [nn.Conv2d(c, 64, 3, 1, 1, bias=False), nn.BatchNorm2d(64), nn.ReLU(inplace=True)]
    cin = 64
    for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
        layers += [_BasicBlock(cin, cout, stride), _BasicBlock(cout, cout, 1)]
        cin = cout
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return SplitClassifier(nn.Sequential(*layers), nn.Linear(512, num_classes), 512,
                           "resnet18", input_shape, num_classes)


ARCHITECTURES: dict[str, Callable[..., SplitClassifier]] = {
    "small_cnn": small_cnn,
    "micro_cnn": micro_cnn,
    "vgg11": vgg11,
    "resnet18": resnet18,
}


def build_model(arch: str, num_classes: int = 10, input_shape=None, seed: int = 0) -> SplitClassifier:
    """Instantiate a registered architecture with seeded default initialisation.

    ``input_shape`` is (H, W, C); ``None`` keeps the architecture's own default.
    """
    try:
        factory = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}") from None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if input_shape is None:
            model = factory(num_classes=num_classes)
        else:
            model = factory(num_classes=num_classes, input_shape=tuple(input_shape))
    return model


def reset_classifier(model: SplitClassifier, seed: int) -> SplitClassifier:
    """Re-draw every head parameter from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.classifier.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / np.sqrt(m.in_features)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.copy_(torch.rand(m.bias.shape, generator=gen) * 2 * bound - bound)
    return model


# ---------------------------------------------------------------- operations

def to_tensor(x) -> torch.Tensor:
    """NHWC array in [0, 1] -> NCHW float tensor."""
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.ascontiguousarray(np.asarray(x, dtype=np.float32).transpose(0, 3, 1, 2)))


def to_labels(y) -> torch.Tensor:
    if isinstance(y, torch.Tensor):
        return y.to(torch.long)
    return torch.tensor(np.asarray(y), dtype=torch.long)


def forward_features(model: SplitClassifier, x, y=None) -> FeatureBatch:
    xt = to_tensor(x)
    h, w, c = model.input_shape
    if xt.dim() != 4 or tuple(xt.shape[1:]) != (c, h, w):
        raise ValueError(f"expected input of shape (B, {c}, {h}, {w}), got {tuple(xt.shape)}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z = model.features(xt)
    model.train(was_training)
    if y is None:
        y = torch.zeros(z.shape[0], dtype=torch.long)
    return FeatureBatch(z, y)


def gradient(model: nn.Module, loss_fn: Callable[[nn.Module, object], torch.Tensor],
             batch) -> dict[str, torch.Tensor]:
    """Gradient of ``loss_fn(model, batch)`` for every trainable parameter.

    Parameters the loss does not touch get zero gradients.  Parameter values are
    never modified.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    loss = loss_fn(model, batch)
    if not torch.isfinite(loss).all():
        raise FloatingPointError(f"non-finite loss {float(loss.detach())}")
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(named, grads)}


def _check_mask(model: SplitClassifier, mask: SparsityMask) -> None:
    n = sum(p.numel() for _, p in model.prunable_parameters())
    if len(mask) != n:
        raise ValueError(f"mask has {len(mask)} entries, feature extractor has {n} prunable weights")
    if mask.scope != "feature_extractor":
        raise ValueError(f"unsupported mask scope {mask.scope!r}")


def _mask_chunks(model: SplitClassifier, mask: SparsityMask):
    offset = 0
    for name, p in model.prunable_parameters():
        k = p.numel()
        yield name, p, mask.keep[offset:offset + k].view_as(p)
        offset += k


def apply_mask(model: SplitClassifier, mask: SparsityMask) -> SplitClassifier:
    """Zero masked weights in place and remember the mask on the model."""
    _check_mask(model, mask)
    with torch.no_grad():
        for _, p, keep in _mask_chunks(model, mask):
            p.mul_(keep.to(p.dtype))
    model.mask = mask
    return model


def enforce_mask(model: SplitClassifier) -> None:
    if model.mask is not None:
        with torch.no_grad():
            for _, p, keep in _mask_chunks(model, model.mask):
                p.mul_(keep.to(p.dtype))


def mask_gradients(model: SplitClassifier) -> None:
    if model.mask is not None:
        for _, p, keep in _mask_chunks(model, model.mask):
            if p.grad is not None:
                p.grad.mul_(keep.to(p.grad.dtype))


def masked_step(model: SplitClassifier, grads: dict[str, torch.Tensor], lr: float,
                mask: SparsityMask | None = None) -> SplitClassifier:
    """Plain gradient step ``p -= lr * g`` that leaves masked weights at exactly zero."""
    mask = mask if mask is not None else model.mask
    params = dict(model.named_parameters())
    keep_of = {}
    if mask is not None:
        _check_mask(model, mask)
        keep_of = {name: keep for name, _, keep in _mask_chunks(model, mask)}
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
            p.sub_(lr * g)
            if name in keep_of:
                p.mul_(keep_of[name].to(p.dtype))
    return model


def recalibrate_batchnorm(model: nn.Module, x, batch_size: int = 256) -> None:
    """Re-estimate every batch-norm running mean/var as the plain average over ``x``.

    Weights are untouched; the model is left in eval mode.
    """
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    xt = to_tensor(x)
    model.train()
    with torch.no_grad():
        for i in range(0, len(xt), batch_size):
            model(xt[i:i + batch_size])
    for m, mom in zip(norms, saved):
        m.momentum = mom
    model.eval()


def clone_model(model: SplitClassifier) -> SplitClassifier:
    return copy.deepcopy(model)


# ---------------------------------------------------------------- checkpoints

def _write_params(state: dict[str, torch.Tensor], path: Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_PARAM_MAGIC)
        fh.write(struct.pack("<II", 1, len(state)))
        for name, t in state.items():
            code = 1 if t.dtype == torch.int64 else 0
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", code, t.dim()))
            fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
            arr = t.detach().cpu().to(_DTYPES[code][0]).contiguous().numpy()
            fh.write(arr.astype(_DTYPES[code][1], copy=False).tobytes(order="C"))


def _read_params(path: Path) -> dict[str, torch.Tensor]:
    raw = path.read_bytes()
    if raw[:4] != _PARAM_MAGIC:
        raise ValueError(f"{path} is not a parameter blob")
    _, count = struct.unpack_from("<II", raw, 4)
    off, out = 12, {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + ln].decode()
        off += ln
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dtype = np.dtype(_DTYPES[code][1])
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape)
        off += n * dtype.itemsize
        out[name] = torch.from_numpy(arr.copy())
    return out


def save_checkpoint(model: SplitClassifier, directory: str | Path, provenance: dict | None = None,
                    seed: int | None = None) -> Path:
    """Write manifest.json, params.bin and (if the model carries a mask) mask.bin."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_params(model.state_dict(), d / "params.bin")
    manifest = {
        "architecture": model.arch,
        "feature_dim": model.feature_dim,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "mask_sparsity": None if model.mask is None else model.mask.sparsity,
        "seed": seed,
        "provenance": provenance or {},
    }
    mask_path = d / "mask.bin"
    if model.mask is not None:
        bits = np.packbits(model.mask.keep.numpy().astype(np.uint8), bitorder="little")
        mask_path.write_bytes(_MASK_MAGIC + struct.pack("<Q", len(model.mask)) + bits.tobytes())
    elif mask_path.exists():
        mask_path.unlink()
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_checkpoint(directory: str | Path) -> SplitClassifier:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    model = build_model(manifest["architecture"], manifest["num_classes"], tuple(manifest["input_shape"]))
    model.load_state_dict(_read_params(d / "params.bin"))
    mask_path = d / "mask.bin"
    if mask_path.exists():
        raw = mask_path.read_bytes()
        if raw[:4] != _MASK_MAGIC:
            raise ValueError(f"{mask_path} is not a mask blob")
        (n,) = struct.unpack_from("<Q", raw, 4)
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=12), count=n, bitorder="little")
        model.mask = SparsityMask(torch.from_numpy(bits.astype(bool)))
    return model
