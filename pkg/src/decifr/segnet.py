"""U-Net segmentation model with a functional (params-in) interface.

The network follows the Pix2Pix U-Net generator layout: ``depth_down`` strided
4x4 convolutions, ``depth_down - 1`` transposed-convolution up blocks with skip
connections, and a final transposed convolution to one logit channel.  With
``depth_down=8`` this is the 16-conv "unet_256" generator (~54.4M parameters).

Parameters live outside the module in :class:`ModelParams` so that gradients
with respect to them can be taken, differentiated again, and shipped around as
flat vectors.
"""

from __future__ import annotations

import io
import json
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .errors import DifferentiationError, InvalidConfigError, InvalidInputError, NotFoundError

BCE_EPS = 1e-7
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class UNetConfig:
    depth_down: int = 4
    depth_up: int | None = None
    base_filters: int = 16
    max_filters: int = 128
    image_size: int = 64
    norm: str = "none"
    init: str = "kaiming"
    zero_final: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth_up is None:
            object.__setattr__(self, "depth_up", self.depth_down - 1)
        if self.depth_down < 2:
            raise InvalidConfigError("depth_down must be >= 2")
        if self.depth_up != self.depth_down - 1:
            raise InvalidConfigError("depth_up must equal depth_down - 1")
        if self.base_filters < 1 or self.max_filters < self.base_filters:
            raise InvalidConfigError("need 1 <= base_filters <= max_filters")
        if self.image_size < 2 ** self.depth_down or self.image_size % 2 ** self.depth_down:
            raise InvalidConfigError(f"image_size {self.image_size} not divisible by 2^{self.depth_down}")
        if self.norm not in ("none", "instance"):
            raise InvalidConfigError(f"unknown norm {self.norm!r}")
        if self.init not in ("kaiming", "normal"):
            raise InvalidConfigError(f"unknown init {self.init!r}")
        if self.dtype not in _DTYPES:
            raise InvalidConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def channels(self) -> list[int]:
        return [min(self.base_filters * 2 ** i, self.max_filters) for i in range(self.depth_down)]

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


PRESETS = {
    "paper": dict(depth_down=8, base_filters=64, max_filters=512, image_size=256, norm="instance", init="normal"),
    "desk": dict(depth_down=4, base_filters=16, max_filters=128, image_size=64),
    "tiny": dict(depth_down=3, base_filters=4, max_filters=16, image_size=16, dtype="float64"),
}


def preset(name: str, **overrides) -> UNetConfig:
    if name not in PRESETS:
        raise InvalidConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return UNetConfig(**{**PRESETS[name], **overrides})


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        norm = cfg.norm == "instance"
        self.down = nn.ModuleList()
        cin = 1
        for i, c in enumerate(ch):
            self.down.append(nn.Conv2d(cin, c, 4, 2, 1))
            cin = c
        # instance norm on every down block except the outermost and innermost
        self.down_norm = [norm and 0 < i < len(ch) - 1 for i in range(len(ch))]
        self.up = nn.ModuleList()
        for i in range(len(ch) - 1, 0, -1):
            cin = ch[i] if i == len(ch) - 1 else 2 * ch[i]
            self.up.append(nn.ConvTranspose2d(cin, ch[i - 1], 4, 2, 1))
        self.up_norm = norm
        self.final = nn.ConvTranspose2d(2 * ch[0], 1, 4, 2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = x
        for i, conv in enumerate(self.down):
            h = conv(h if i == 0 else F.leaky_relu(h, 0.2))
            if self.down_norm[i]:
                h = F.instance_norm(h)
            skips.append(h)
        for j, conv in enumerate(self.up):
            h = conv(F.relu(h))
            if self.up_norm:
                h = F.instance_norm(h)
            h = torch.cat([h, skips[-2 - j]], dim=1)
        return self.final(F.relu(h))


@lru_cache(maxsize=8)
def _skeleton(cfg: UNetConfig) -> UNet:
    return UNet(cfg).to(cfg.torch_dtype)


@dataclass
class ModelParams:
    """Ordered named tensors of one U-Net plus the config that shapes them."""

    config: UNetConfig
    tensors: "OrderedDict[str, torch.Tensor]"

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def layout(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        """name -> (offset, shape) within the flat vector."""
        out, offset = {}, 0
        for name, t in self.tensors.items():
            out[name] = (offset, tuple(t.shape))
            offset += t.numel()
        return out

    def flatten(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self.tensors.values()])

    def with_flat(self, vec: torch.Tensor | np.ndarray) -> "ModelParams":
        vec = torch.as_tensor(vec, dtype=self.config.torch_dtype)
        if vec.ndim != 1 or vec.numel() != self.num_params:
            raise InvalidInputError(f"flat vector of length {vec.numel()} does not fit {self.num_params} params")
        out, offset = OrderedDict(), 0
        for name, t in self.tensors.items():
            out[name] = vec[offset:offset + t.numel()].reshape(t.shape).clone()
            offset += t.numel()
        return ModelParams(self.config, out)

    def detached(self, requires_grad: bool = False) -> "ModelParams":
        return ModelParams(self.config, OrderedDict(
            (k, v.detach().clone().requires_grad_(requires_grad)) for k, v in self.tensors.items()))

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors.values())


def init_model(config: UNetConfig, seed: int) -> ModelParams:
    """Deterministic initial parameters.

    ``init="normal"`` is the Pix2Pix N(0, 0.02) scheme (meant for normalised
    nets); ``"kaiming"`` scales by fan-in, which un-normalised nets need.
    """
    gen = torch.Generator().manual_seed(seed)
    skel = _skeleton(config)
    tensors = OrderedDict()
    for name, p in skel.named_parameters():
        t = torch.zeros(p.shape, dtype=torch.float64)
        if name.endswith("weight"):
            if config.init == "normal":
                t.normal_(0.0, 0.02, generator=gen)
            else:
                # Conv2d weight: (out, in, k, k); ConvTranspose2d: (in, out, k, k)
                transposed = name.startswith("up") or name.startswith("final")
                fan_in = (p.shape[0] if transposed else p.shape[1]) * p.shape[2] * p.shape[3]
                if transposed:
                    fan_in //= 4  # stride-2 transposed conv: each output sees a quarter of the kernel
                t.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
        if name.startswith("final") and config.zero_final:
            t.zero_()
        tensors[name] = t.to(config.torch_dtype)
    return ModelParams(config, tensors)


@dataclass
class Prediction:
    logits: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


def as_batch(image, config: UNetConfig) -> torch.Tensor:
    """Coerce an (H, W), (B, H, W) or (B, 1, H, W) image to a model batch."""
    x = torch.as_tensor(image)
    if not x.is_floating_point():
        x = x.to(config.torch_dtype)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != (config.image_size, config.image_size):
        raise InvalidInputError(f"expected a {config.image_size}x{config.image_size} single-channel image, got {tuple(x.shape)}")
    return x


def forward(params: ModelParams, image) -> Prediction:
    x = as_batch(image, params.config)
    return Prediction(functional_call(_skeleton(params.config), dict(params.tensors), (x,)))


def seg_loss(pred: Prediction | torch.Tensor, mask) -> torch.Tensor:
    """Mean pixel-wise binary cross-entropy on clamped probabilities.

    ``pred`` may be a :class:`Prediction` or a probability tensor.
    """
    p = pred.probs if isinstance(pred, Prediction) else torch.as_tensor(pred)
    y = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask).to(p.dtype)
    if y.shape != p.shape:
        y = y.reshape(p.shape)
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def loss_and_param_grad(params: ModelParams, images, masks,
                        create_graph: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch-mean segmentation loss and its flat gradient w.r.t. all parameters.

    With ``create_graph=True`` both outputs stay differentiable w.r.t. the
    images, which is what gradient inversion needs.
    """
    x = as_batch(images, params.config)
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    y = torch.as_tensor(masks).to(x.dtype).reshape(x.shape)
    leaves = params.detached(requires_grad=True)
    loss = seg_loss(forward(leaves, x), y)
    grads = torch.autograd.grad(loss, list(leaves.tensors.values()), create_graph=create_graph)
    return loss, torch.cat([g.reshape(-1) for g in grads])


def param_grad(params: ModelParams, images, masks, create_graph: bool = False) -> torch.Tensor:
    """Flat gradient of the batch-mean segmentation loss w.r.t. all parameters."""
    return loss_and_param_grad(params, images, masks, create_graph)[1]


def input_grad_of(scalar_fn: Callable[[torch.Tensor], torch.Tensor], x) -> torch.Tensor:
    """Gradient of ``scalar_fn(x)`` w.r.t. the image ``x``.

    ``scalar_fn`` may itself contain :func:`param_grad` calls made with
    ``create_graph=True``; the derivative then runs through them.
    """
    x = torch.as_tensor(x).detach().clone().requires_grad_(True)
    value = scalar_fn(x)
    if not torch.is_tensor(value) or value.numel() != 1:
        raise DifferentiationError("scalar_fn must return a single-element tensor")
    if not value.requires_grad:
        raise DifferentiationError("scalar_fn output is not connected to x; "
                                   "was param_grad called without create_graph=True?")
    try:
        (g,) = torch.autograd.grad(value, x)
    except RuntimeError as exc:
        raise DifferentiationError(f"cannot differentiate through scalar_fn: {exc}") from exc
    return g


# --------------------------------------------------------------------------
# persistence

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(params: ModelParams, path: Path, **header) -> Path:
    """Write a byte-deterministic archive of named tensors + JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"config": asdict(params.config), "names": params.names, **header}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _zip_entry(zf, "header.json", json.dumps(meta, sort_keys=True).encode("utf-8"))
        for i, (name, t) in enumerate(params.tensors.items()):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, t.detach().cpu().numpy(), allow_pickle=False)
            _zip_entry(zf, f"t{i:04d}.npy", buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"checkpoint {path} not found")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("header.json"))
        config = UNetConfig(**meta["config"])
        tensors = OrderedDict()
        for i, name in enumerate(meta["names"]):
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"t{i:04d}.npy")), allow_pickle=False)
            tensors[name] = torch.from_numpy(arr.copy())
    return ModelParams(config, tensors), meta


def export_flat(params_or_vec, path: Path, layout: dict | None = None) -> Path:
    """Little-endian float32 flat vector plus a ``.json`` sidecar layout."""
    path = Path(path)
    if isinstance(params_or_vec, ModelParams):
        layout = params_or_vec.layout()
        vec = params_or_vec.flatten()
    else:
        vec = params_or_vec
    arr = np.asarray(torch.as_tensor(vec).detach().cpu().numpy(), dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar = {"dtype": "<f4", "length": int(arr.size),
               "layout": {k: {"offset": o, "shape": list(s)} for k, (o, s) in (layout or {}).items()}}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, sort_keys=True), encoding="utf-8")
    return path


def import_flat(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    return np.frombuffer(path.read_bytes(), dtype="<f4").copy(), sidecar
