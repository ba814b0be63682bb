"""Embedding network: backbone -> dropout -> parallel FC1 (signature) / FC2 (attributes).

The identity classifier sits on FC1; one classifier per attribute sits on FC2.
Binary attributes get a single sigmoid logit, categorical ones a softmax head.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
from torch import nn

from . import binio
from .data.types import DEFAULT_SCHEMA, AttributeSchema

WEIGHTS_MAGIC = b"MTRW"
WEIGHTS_VERSION = 1

BACKBONES: dict[str, Callable[["ModelConfig"], tuple[nn.Module, int]]] = {}


class ModelError(ValueError):
    pass


def register_backbone(name: str):
    def deco(factory):
        BACKBONES[name] = factory
        return factory
    return deco


@dataclass
class ModelConfig:
    num_identities: int
    backbone: str = "tiny_cnn"
    signature_dim: int = 4096
    fc2_dim: int = 100
    attribute_schema: AttributeSchema = DEFAULT_SCHEMA
    dropout_keep: float = 0.8
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 3
    backbone_norm: bool = True
    fc2_stop_gradient: bool = False
    dtype: str = "float32"
    init_seed: int = 0
    backbone_weights: Optional[str] = None

    def __post_init__(self) -> None:
        if self.num_identities < 1:
            raise ModelError("num_identities must be >= 1")
        if self.signature_dim < 1 or self.fc2_dim < 1:
            raise ModelError("signature_dim and fc2_dim must be >= 1")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ModelError("dropout_keep must lie in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ModelError("dtype must be float32 or float64")
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attribute_schema"] = self.attribute_schema.to_list()
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "attribute_schema" in d:
            d["attribute_schema"] = AttributeSchema.from_list(d["attribute_schema"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@register_backbone("tiny_cnn")
def _tiny_cnn(config: ModelConfig) -> tuple[nn.Module, int]:
    layers: list[nn.Module] = []
    c_in = config.in_channels
    for c_out in config.backbone_channels:
        # a bias in front of the normalization would be cancelled by it
        layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=not config.backbone_norm)]
        if config.backbone_norm:
            # per-sample normalization: identical in train and eval mode
            layers.append(nn.GroupNorm(min(8, c_out), c_out))
        layers.append(nn.ReLU())
        c_in = c_out
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), c_in


@register_backbone("external_pretrained")
def _resnet50(config: ModelConfig) -> tuple[nn.Module, int]:
    # torchvision ResNet50 trunk; pretrained weights come from a local file
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    if config.backbone_weights:
        state = torch.load(config.backbone_weights, map_location="cpu")
        net.load_state_dict(state, strict=False)
    feat = net.fc.in_features
    net.fc = nn.Identity()
    return net, feat


@dataclass
class ForwardOutput:
    signatures: torch.Tensor
    identity_logits: torch.Tensor
    attribute_logits: list[torch.Tensor] = field(default_factory=list)

    def tensors(self) -> list[torch.Tensor]:
        return [self.signatures, self.identity_logits, *self.attribute_logits]

    def numpy(self) -> dict:
        def cvt(t):
            return t.detach().cpu().numpy().astype(np.float64)
        return {
            "signatures": cvt(self.signatures),
            "identity_logits": cvt(self.identity_logits),
            "attribute_logits": [cvt(t) for t in self.attribute_logits],
        }

    def backward(self, grads: dict) -> None:
        """Back-propagate externally computed output gradients into the network."""
        outs, gs = [], []
        for t, g in zip(
            self.tensors(),
            [grads["signatures"], grads["identity_logits"], *grads["attribute_logits"]],
        ):
            outs.append(t)
            gs.append(torch.as_tensor(np.asarray(g), dtype=t.dtype))
        torch.autograd.backward(outs, gs)


class ReIDNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.backbone not in BACKBONES:
            raise ModelError(f"unknown backbone {config.backbone!r}; known: {sorted(BACKBONES)}")
        self.config = config
        self.backbone, feat = BACKBONES[config.backbone](config)
        self.feature_dim = feat
        self.fc1 = nn.Linear(feat, config.signature_dim)
        self.fc2 = nn.Linear(feat, config.fc2_dim)
        self.id_head = nn.Linear(config.signature_dim, config.num_identities)
        self.att_heads = nn.ModuleList(
            nn.Linear(config.fc2_dim, w) for w in config.attribute_schema.head_widths
        )
        self.to(config.torch_dtype)
        self.reset_parameters(config.init_seed)

    def reset_parameters(self, seed: int, only: Optional[str] = None) -> None:
        """Seeded uniform fan-in init, zero biases."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, mod in self.named_modules():
                if only is not None and not name.startswith(only):
                    continue
                if isinstance(mod, (nn.Conv2d, nn.Linear)):
                    fan_in = mod.weight[0].numel()
                    gain = 6.0 if isinstance(mod, nn.Conv2d) else 3.0
                    bound = math.sqrt(gain / fan_in)
                    mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen, dtype=mod.weight.dtype) * 2 * bound - bound)
                    if mod.bias is not None:
                        mod.bias.zero_()

    def _dropout(self, h: torch.Tensor, generator: Optional[torch.Generator]) -> torch.Tensor:
        keep = self.config.dropout_keep
        if keep >= 1.0:
            return h
        mask = torch.rand(h.shape, generator=generator, dtype=h.dtype) < keep
        return h * mask / keep

    def forward(self, x: torch.Tensor, train: bool = False, generator: Optional[torch.Generator] = None) -> ForwardOutput:
        h = self.backbone(x)
        if train:
            h = self._dropout(h, generator)
        sig = self.fc1(h)
        h2 = h.detach() if self.config.fc2_stop_gradient else h
        attr_feat = torch.relu(self.fc2(h2))
        return ForwardOutput(
            signatures=sig,
            identity_logits=self.id_head(sig),
            attribute_logits=[head(attr_feat) for head in self.att_heads],
        )


class Model:
    """Owns a :class:`ReIDNet` and exposes the numpy-facing API used by the trainer."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.net = ReIDNet(config)

    def _as_input(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images), dtype=self.config.torch_dtype)
        if x.ndim != 4 or x.shape[-1] != self.config.in_channels:
            raise ModelError(
                f"images must be N x H x W x {self.config.in_channels}, got {tuple(x.shape)}"
            )
        return x.permute(0, 3, 1, 2).contiguous()

    def forward(self, images, mode: str = "eval", generator: Optional[torch.Generator] = None) -> ForwardOutput:
        if mode not in ("train", "eval"):
            raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = self._as_input(images)
        if mode == "eval":
            self.net.eval()
            with torch.no_grad():
                out = self.net(x, train=False)
            for t in out.tensors():
                if not torch.all(torch.isfinite(t)):
                    raise ModelError("non-finite activations in eval forward")
            return out
        self.net.train()
        return self.net(x, train=True, generator=generator)

    def named_parameters(self, freeze_backbone: bool = False) -> list[tuple[str, nn.Parameter]]:
        return [
            (n, p)
            for n, p in self.net.named_parameters()
            if not (freeze_backbone and n.startswith("backbone."))
        ]

    def parameters(self, freeze_backbone: bool = False) -> list[nn.Parameter]:
        return [p for _, p in self.named_parameters(freeze_backbone)]

    def parameter_count(self, freeze_backbone: bool = False) -> int:
        return sum(p.numel() for p in self.parameters(freeze_backbone))

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, p.detach().cpu().numpy().copy()) for n, p in self.net.named_parameters()]

    def digest(self) -> str:
        return self.config.digest().hex()

    def save_weights(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.weights_bytes())

    def weights_bytes(self) -> bytes:
        import io

        buf = io.BytesIO()
        cfg = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        buf.write(WEIGHTS_MAGIC)
        buf.write(struct.pack("<I", WEIGHTS_VERSION))
        buf.write(self.config.digest())
        buf.write(struct.pack("<I", len(cfg)))
        buf.write(cfg)
        binio.write_records(buf, self.state_arrays())
        return binio.seal(buf.getvalue())

    def load_weights(self, path: Union[str, Path], allow_missing_heads: bool = False) -> None:
        cfg, tensors = read_weights(path)
        self.load_arrays(cfg, tensors, allow_missing_heads)

    def load_arrays(self, cfg: dict, tensors: dict, allow_missing_heads: bool = False) -> None:
        mine = self.config.to_dict()
        ignore = {"init_seed", "backbone_weights"}
        if allow_missing_heads:
            ignore.add("attribute_schema")
        bad = sorted(k for k in mine if k not in ignore and mine[k] != cfg.get(k))
        if bad:
            detail = ", ".join(f"{k}: file={cfg.get(k)!r} model={mine[k]!r}" for k in bad)
            raise binio.FormatError(f"weight file config mismatch ({detail})")
        params = dict(self.net.named_parameters())
        with torch.no_grad():
            for name, p in params.items():
                arr = tensors.get(name)
                is_head = name.startswith("att_heads.")
                if arr is None or tuple(arr.shape) != tuple(p.shape):
                    if allow_missing_heads and is_head:
                        continue
                    raise binio.FormatError(f"weight file lacks tensor {name!r} of shape {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr).to(p.dtype))
        extra = set(tensors) - set(params)
        if extra and not allow_missing_heads:
            raise binio.FormatError(f"weight file has unexpected tensors {sorted(extra)}")


def read_weights(path_or_blob: Union[str, Path, bytes]) -> tuple[dict, dict]:
    """Parse a weight file into (config dict, name -> array)."""
    blob = path_or_blob if isinstance(path_or_blob, bytes) else Path(path_or_blob).read_bytes()
    fh = binio.unseal(blob, "weight file")
    if binio.read_exact(fh, 4) != WEIGHTS_MAGIC:
        raise binio.FormatError("not a weight file (bad magic)")
    (version,) = struct.unpack("<I", binio.read_exact(fh, 4))
    if version != WEIGHTS_VERSION:
        raise binio.FormatError(f"unsupported weight file version {version}")
    digest = binio.read_exact(fh, 32)
    (n,) = struct.unpack("<I", binio.read_exact(fh, 4))
    cfg_bytes = binio.read_exact(fh, n)
    if hashlib.sha256(cfg_bytes).digest() != digest:
        raise binio.FormatError("weight file config digest mismatch")
    tensors = binio.read_records(fh)
    return json.loads(cfg_bytes), tensors
