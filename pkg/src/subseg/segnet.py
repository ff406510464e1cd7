"""U-Net backbone with superclass and subclass heads.

Head variants (selected by ``ModelConfig``):

* Mod: two 1x1 classifiers on the shared features ``F``.
* PC: the subclassifier additionally sees the superclass logits, with the
  gradient stopped so subclass supervision cannot move the superclass head.
* SN: separately batch-normalized background and foreground branches; the
  background branch emits one logit ``b`` that is channel 0 of both
  assembled distributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.rng import Rng, derive
from .core.tensor import Parameter, ShapeError, Tensor
from .data import HierarchySpec


@dataclass(frozen=True)
class ModelConfig:
    hierarchy: HierarchySpec = HierarchySpec()
    enable_pc: bool = False
    enable_sn: bool = False
    base_channels: int = 16
    depth: int = 3
    in_channels: int = 1
    # False gives the plain U-Net baselines (subclass head only)
    superclass_head: bool = True
    # what the prior concatenation feeds the subclassifier: raw logits or softmax probabilities
    prior: str = "logits"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.prior not in ("logits", "probs"):
            raise ValueError(f"prior must be 'logits' or 'probs', got {self.prior!r}")
        if (self.enable_pc or self.enable_sn) and not self.superclass_head:
            raise ValueError("PC and SN need the superclass head")


@dataclass
class HeadOutputs:
    super_logits: Tensor | None   # (N, R, H, W)
    sub_logits: Tensor            # (N, K, H, W)
    features: Tensor              # (N, C_f, H, W)

    def select(self, start: int, stop: int) -> "HeadOutputs":
        """Batch rows ``start:stop`` (gradients flow back to the full batch)."""
        def cut(t):
            if t is None:
                return None
            return ops.crop(t, (slice(start, stop),) + (slice(None),) * (t.ndim - 1))
        return HeadOutputs(cut(self.super_logits), cut(self.sub_logits), cut(self.features))


class SegNet:
    """Parameters, batch-norm buffers and the forward pass for one ``ModelConfig``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True
        self._rng = Rng(derive(seed, "init"))
        self._build()
        del self._rng

    # ------------------------------------------------------------ construction

    def _conv(self, name: str, cin: int, cout: int, k: int, bias: bool) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        w = (self._rng.normal((cout, cin, k, k)) * std).astype(np.float32)
        self.params[f"{name}.w"] = Parameter(w, name=f"{name}.w")
        if bias:
            self.params[f"{name}.b"] = Parameter(np.zeros(cout, np.float32), name=f"{name}.b")

    def _bn(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = Parameter(np.ones(c, np.float32), name=f"{name}.gamma")
        self.params[f"{name}.beta"] = Parameter(np.zeros(c, np.float32), name=f"{name}.beta")
        self.buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(c, np.float32)

    def _block(self, name: str, cin: int, cout: int) -> None:
        self._conv(f"{name}.conv1", cin, cout, 3, bias=False)
        self._bn(f"{name}.bn1", cout)
        self._conv(f"{name}.conv2", cout, cout, 3, bias=False)
        self._bn(f"{name}.bn2", cout)

    def _build(self) -> None:
        cfg = self.cfg
        b, D = cfg.base_channels, cfg.depth
        R, K = cfg.hierarchy.R, cfg.hierarchy.K
        widths = [b * 2 ** d for d in range(D + 1)]
        self._block("enc0", cfg.in_channels, widths[0])
        for d in range(1, D + 1):
            self._block(f"enc{d}", widths[d - 1], widths[d])
        for d in range(D, 0, -1):
            self._block(f"dec{d}", widths[d] + widths[d - 1], widths[d - 1])
        C = widths[0]
        prior_ch = R if cfg.enable_pc else 0
        if cfg.enable_sn:
            for branch in ("bg", "fg"):
                self._bn(f"sn.{branch}.bn", C)
                self._conv(f"sn.{branch}.conv1", C, C, 3, bias=True)
                self._conv(f"sn.{branch}.conv2", C, C, 3, bias=True)
            self._conv("sn.bg.cls", C, 1, 1, bias=True)
            self._conv("sn.fg.super", C, 1, 1, bias=True)
            self._conv("sn.fg.sub", C + prior_ch, K - 1, 1, bias=True)
        else:
            if cfg.superclass_head:
                self._conv("head.super", C, R, 1, bias=True)
            self._conv("head.sub", C + prior_ch, K, 1, bias=True)

    # ------------------------------------------------------------ state helpers

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def train(self, mode: bool = True) -> "SegNet":
        self.training = mode
        return self

    def eval(self) -> "SegNet":
        return self.train(False)

    def to(self, dtype) -> "SegNet":
        """Cast parameters and buffers, e.g. to float64 for shadow gradient checks."""
        for p in self.params.values():
            p.astype(dtype)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # ------------------------------------------------------------ forward

    def conv(self, name: str, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.params[f"{name}.w"], self.params.get(f"{name}.b"))

    def bn(self, name: str, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                              self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"],
                              self.training)

    def block(self, name: str, x: Tensor) -> Tensor:
        x = ops.relu(self.bn(f"{name}.bn1", self.conv(f"{name}.conv1", x)))
        return ops.relu(self.bn(f"{name}.bn2", self.conv(f"{name}.conv2", x)))

    def __call__(self, x) -> HeadOutputs:
        return heads_forward(unet_forward(x, self), self)


def unet_forward(x, net: SegNet) -> Tensor:
    """Encoder-decoder with skip concatenations; returns ``F`` at input resolution."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    D = net.cfg.depth
    if x.ndim != 4 or x.shape[1] != net.cfg.in_channels:
        raise ShapeError(f"unet_forward: expected (N, {net.cfg.in_channels}, H, W), got {x.shape}")
    if x.shape[2] % 2 ** D or x.shape[3] % 2 ** D:
        raise ShapeError(f"unet_forward: spatial size {x.shape[2:]} not divisible by 2**depth = {2 ** D}")
    skips = []
    h = net.block("enc0", x)
    for d in range(1, D + 1):
        skips.append(h)
        h = net.block(f"enc{d}", ops.max_pool2d(h))
    for d in range(D, 0, -1):
        h = net.block(f"dec{d}", ops.concat([ops.upsample2(h), skips[d - 1]], axis=1))
    return h


def _prior(net: SegNet, super_logits: Tensor) -> Tensor:
    s = ops.stop_gradient(super_logits)
    return ops.softmax(s, axis=1) if net.cfg.prior == "probs" else s


def heads_forward(F: Tensor, net: SegNet) -> HeadOutputs:
    cfg = net.cfg
    if cfg.enable_sn:
        return separate_norm_forward(F, net)
    if not cfg.superclass_head:
        return HeadOutputs(None, net.conv("head.sub", F), F)
    super_logits = net.conv("head.super", F)
    sub_in = ops.concat([F, _prior(net, super_logits)], axis=1) if cfg.enable_pc else F
    return HeadOutputs(super_logits, net.conv("head.sub", sub_in), F)


def separate_norm_forward(F: Tensor, net: SegNet) -> HeadOutputs:
    if not net.cfg.enable_sn:
        raise ValueError("separate_norm_forward needs enable_sn")

    def branch(name):
        h = net.bn(f"sn.{name}.bn", F)
        h = ops.relu(net.conv(f"sn.{name}.conv1", h))
        return net.conv(f"sn.{name}.conv2", h)

    bg = branch("bg")
    fg = branch("fg")
    b = net.conv("sn.bg.cls", bg)
    s = net.conv("sn.fg.super", fg)
    super_logits = ops.concat([b, s], axis=1)
    sub_in = ops.concat([fg, _prior(net, super_logits)], axis=1) if net.cfg.enable_pc else fg
    u = net.conv("sn.fg.sub", sub_in)
    return HeadOutputs(super_logits, ops.concat([b, u], axis=1), F)
