"""Desk-scale CNNs with pluggable normalization sites.

Two architectures are provided: a 5-conv-block net with a linear head
(``toy_alexnet``) and a quarter-width 8-residual-block net (``mini_resnet``).
Every conv feeds a norm site that runs in one of three modes: learnable
plain affine, passport-derived affine, or an attacker-substituted affine
(optionally wrapped in an expansion block).
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor
from .checkpoint import Checkpoint
from .passports import Passport, derive_affine

ARCHITECTURES = ("toy_alexnet", "mini_resnet")

_ALEX_WIDTHS = (16, 32, 64, 64, 64)
_ALEX_STRIDES = (1, 2, 1, 2, 1)
_RES_STAGE_WIDTHS = (16, 32, 64, 128)
_RES_BLOCKS_PER_STAGE = 2


class SpecError(ValueError):
    """Inconsistent model specification."""


class MissingPassportError(RuntimeError):
    """Forward through a passport site without its passport attached."""


class NormMode(enum.Enum):
    PLAIN = "plain"
    PASSPORT = "passport"
    ATTACK = "attack"


def num_norm_sites(architecture: str) -> int:
    if architecture == "toy_alexnet":
        return len(_ALEX_WIDTHS)
    if architecture == "mini_resnet":
        return 1 + 2 * _RES_BLOCKS_PER_STAGE * len(_RES_STAGE_WIDTHS)
    raise SpecError(f"unknown architecture '{architecture}'")


def parse_passport_sites(text: str, architecture: str) -> tuple[int, ...]:
    """Resolve 'firstK' / 'lastK' / comma lists / 'none' to site indices."""
    total = num_norm_sites(architecture)
    text = text.strip().lower().replace("-", "")
    if text in ("", "none"):
        return ()
    if text.startswith("first"):
        k = int(text[5:])
        sites = tuple(range(k))
    elif text.startswith("last"):
        k = int(text[4:])
        sites = tuple(range(total - k, total))
    elif text == "all":
        sites = tuple(range(total))
    else:
        sites = tuple(int(tok) for tok in text.split(","))
    if any(s < 0 or s >= total for s in sites):
        raise SpecError(f"passport sites {sites} out of range for {architecture} ({total})")
    return sites


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    num_classes: int = 10
    in_channels: int = 1
    image_hw: tuple[int, int] = (28, 28)
    passport_sites: tuple[int, ...] = ()

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise SpecError(f"unknown architecture '{self.architecture}'")
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        total = num_norm_sites(self.architecture)
        sites = tuple(self.passport_sites)
        if len(set(sites)) != len(sites):
            raise SpecError(f"duplicate passport sites in {sites}")
        if any(s < 0 or s >= total for s in sites):
            raise SpecError(f"passport sites {sites} out of range (0..{total - 1})")
        object.__setattr__(self, "passport_sites", tuple(sorted(sites)))

    @property
    def num_sites(self) -> int:
        return num_norm_sites(self.architecture)

    def spec_hash(self) -> str:
        payload = json.dumps(
            {
                "architecture": self.architecture,
                "num_classes": self.num_classes,
                "in_channels": self.in_channels,
                "image_hw": list(self.image_hw),
                "passport_sites": list(self.passport_sites),
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def without_passports(self) -> "ModelSpec":
        return replace(self, passport_sites=())


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv2d:
    """Bias-free convolution layer (a norm site always follows)."""

    def __init__(self, cin: int, cout: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator):
        fan_in = cin * kernel * kernel
        self.weight = Tensor(_he_uniform(rng, (cout, cin, kernel, kernel), fan_in),
                             requires_grad=True)
        self.stride = stride
        self.padding = padding
        # applied to the weight before use; lets an attacker reparametrize it
        self.weight_transform = None

    def effective_weight(self) -> Tensor:
        if self.weight_transform is None:
            return self.weight
        return self.weight_transform(self.weight)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.effective_weight(), self.stride, self.padding)


class Linear:
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.weight = Tensor(_he_uniform(rng, (cout, cin), cin), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=DTYPE), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.matmul(x, ad.transpose(self.weight)) + self.bias


class NormSite:
    """Batch norm (no built-in affine) plus a mode-dependent affine transform.

    ``stats_frozen`` pins normalization to the stored running statistics even
    in train mode; attack preparation freezes every non-substituted site.
    """

    def __init__(self, index: int, channels: int, host_conv: Conv2d,
                 eps: float = 1e-5, momentum: float = 0.1):
        self.index = index
        self.channels = channels
        self.host_conv = host_conv
        self.eps = eps
        self.momentum = momentum
        self.mode = NormMode.PLAIN
        self.gamma: Tensor | None = Tensor(np.ones(channels, dtype=DTYPE), requires_grad=True)
        self.beta: Tensor | None = Tensor(np.zeros(channels, dtype=DTYPE), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.block = None  # attack-mode expansion block, or None for direct affine
        self.stats_frozen = False

    def set_passport_mode(self) -> None:
        self.mode = NormMode.PASSPORT
        self.gamma = None
        self.beta = None
        self.block = None

    def set_attack_mode(self, block=None) -> None:
        self.mode = NormMode.ATTACK
        self.gamma = Tensor(np.ones(self.channels, dtype=DTYPE), requires_grad=True)
        self.beta = Tensor(np.zeros(self.channels, dtype=DTYPE), requires_grad=True)
        self.block = block

    def affine(self, passport: Passport | None):
        """Per-channel (gamma, beta) tensors for the current mode."""
        if self.mode is NormMode.PASSPORT:
            if passport is None:
                raise MissingPassportError(
                    f"norm site {self.index} holds a passport layer but no passport "
                    f"was presented (unauthorized access)"
                )
            return derive_affine(self.host_conv.weight, passport,
                                 self.host_conv.stride, self.host_conv.padding)
        if self.mode is NormMode.ATTACK and self.block is not None:
            return self.block.forward(self.gamma), self.beta
        return self.gamma, self.beta

    def normalize(self, x: Tensor, gamma: Tensor, beta: Tensor, train: bool) -> Tensor:
        bn_train = train and not self.stats_frozen
        h = ad.batch_norm2d(x, self.running_mean, self.running_var,
                            train=bn_train, momentum=self.momentum, eps=self.eps)
        c = self.channels
        return h * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)

    def forward(self, x: Tensor, passport: Passport | None, train: bool) -> Tensor:
        gamma, beta = self.affine(passport)
        return self.normalize(x, gamma, beta, train)


class _Model:
    """Common plumbing shared by both architectures."""

    spec: ModelSpec
    sites: list[NormSite]

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.sites = []
        self.site_gammas: dict[int, Tensor] = {}
        self.site_betas: dict[int, Tensor] = {}
        self._site_input_shapes: list[tuple[int, int, int]] = []

    # subclasses fill these in
    def _forward_impl(self, x, passports, train):  # pragma: no cover - abstract
        raise NotImplementedError

    def _structure(self):  # pragma: no cover - abstract
        raise NotImplementedError

    def forward(self, x: Tensor, passports: dict[int, Passport] | None = None,
                train: bool = False) -> Tensor:
        passports = passports or {}
        self.site_gammas = {}
        self.site_betas = {}
        return self._forward_impl(x, passports, train)

    def _apply_site(self, site: NormSite, x: Tensor, passports, train) -> Tensor:
        gamma, beta = site.affine(passports.get(site.index))
        if site.mode is not NormMode.PLAIN:
            self.site_gammas[site.index] = gamma
            self.site_betas[site.index] = beta
        return site.normalize(x, gamma, beta, train)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        params: OrderedDict[str, Tensor] = OrderedDict()
        for name, obj in self._structure():
            if isinstance(obj, Conv2d):
                params[f"{name}.weight"] = obj.weight
            elif isinstance(obj, Linear):
                params[f"{name}.weight"] = obj.weight
                params[f"{name}.bias"] = obj.bias
            elif isinstance(obj, NormSite):
                if obj.gamma is not None:
                    params[f"{name}.gamma"] = obj.gamma
                    params[f"{name}.beta"] = obj.beta
                if obj.block is not None:
                    for pname, tensor in obj.block.named_tensors():
                        params[f"{name}.block.{pname}"] = tensor
        return params

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, obj in self._structure():
            if isinstance(obj, NormSite):
                buffers[f"{name}.running_mean"] = obj.running_mean
                buffers[f"{name}.running_var"] = obj.running_var
        return buffers

    def trainable_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(
            (n, p) for n, p in self.named_parameters().items() if p.requires_grad
        )

    def checkpoint_tensors(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters().items():
            out[name] = p.data.copy()
        for name, buf in self.named_buffers().items():
            out[name] = buf.copy()
        return out

    def to_checkpoint(self, seed: int = 0, epoch: int = 0) -> Checkpoint:
        return Checkpoint(
            tensors=self.checkpoint_tensors(),
            spec_hash=self.spec.spec_hash(),
            seed=seed,
            epoch=epoch,
        )

    def load_state(self, checkpoint: Checkpoint, partial: bool = False) -> None:
        """Copy checkpoint tensors into this model by name.

        Strict mode (default) requires the checkpoint hash to match the spec
        and the name inventories to agree exactly. ``partial`` copies the
        intersection, used when porting weights into a re-moded model.
        """
        if not partial and checkpoint.spec_hash != self.spec.spec_hash():
            raise SpecError(
                f"checkpoint spec hash {checkpoint.spec_hash} does not match "
                f"model spec hash {self.spec.spec_hash()}"
            )
        own = OrderedDict()
        for name, p in self.named_parameters().items():
            own[name] = p.data
        for name, buf in self.named_buffers().items():
            own[name] = buf
        if not partial:
            missing = set(own) - set(checkpoint.tensors)
            extra = set(checkpoint.tensors) - set(own)
            if missing or extra:
                raise SpecError(
                    f"checkpoint names do not match model (missing={sorted(missing)}, "
                    f"extra={sorted(extra)})"
                )
        for name, arr in checkpoint.tensors.items():
            if name not in own:
                if partial:
                    continue
                raise SpecError(f"unexpected tensor '{name}'")
            if own[name].shape != arr.shape:
                raise SpecError(
                    f"shape mismatch for '{name}': checkpoint {arr.shape}, "
                    f"model {own[name].shape}"
                )
            own[name][...] = arr

    def passport_shapes(self) -> dict[int, tuple[int, int, int]]:
        """Input feature-map shape (C,H,W) feeding each passport site's conv."""
        return {s: self._site_input_shapes[s] for s in self.spec.passport_sites}

    def site_channels(self, index: int) -> int:
        return self.sites[index].channels

    def conv_layer_names(self) -> list[str]:
        return [name for name, obj in self._structure()
                if isinstance(obj, Conv2d) and not name.endswith("shortcut")]

    def get_conv(self, layer_index: int) -> tuple[str, Conv2d]:
        names = self.conv_layer_names()
        if not 0 <= layer_index < len(names):
            raise SpecError(f"conv layer index {layer_index} out of range (0..{len(names) - 1})")
        name = names[layer_index]
        for n, obj in self._structure():
            if n == name:
                return name, obj
        raise AssertionError  # pragma: no cover


class ToyAlexNet(_Model):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        h, w = spec.image_hw
        cin = spec.in_channels
        self.convs: list[Conv2d] = []
        for i, (width, stride) in enumerate(zip(_ALEX_WIDTHS, _ALEX_STRIDES)):
            conv = Conv2d(cin, width, 3, stride, 1, rng)
            self.convs.append(conv)
            self.sites.append(NormSite(i, width, conv))
            self._site_input_shapes.append((cin, h, w))
            h = (h + 2 - 3) // stride + 1
            w = (w + 2 - 3) // stride + 1
            cin = width
        self.fc = Linear(_ALEX_WIDTHS[-1], spec.num_classes, rng)

    def _forward_impl(self, x, passports, train):
        h = x
        for conv, site in zip(self.convs, self.sites):
            h = conv.forward(h)
            h = self._apply_site(site, h, passports, train)
            h = ad.relu(h)
        return self.fc.forward(ad.global_avg_pool(h))

    def _structure(self):
        for i, conv in enumerate(self.convs):
            yield f"conv{i}", conv
        for i, site in enumerate(self.sites):
            yield f"site{i}", site
        yield "fc", self.fc


class _ResidualBlock:
    def __init__(self, cin: int, cout: int, stride: int, site_base: int,
                 rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng)
        self.site1 = NormSite(site_base, cout, self.conv1)
        self.site2 = NormSite(site_base + 1, cout, self.conv2)
        if stride != 1 or cin != cout:
            self.shortcut = Conv2d(cin, cout, 1, stride, 0, rng)
        else:
            self.shortcut = None


class MiniResNet(_Model):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__(spec)
        h, w = spec.image_hw
        cin = spec.in_channels
        self.stem = Conv2d(cin, _RES_STAGE_WIDTHS[0], 3, 1, 1, rng)
        self.sites.append(NormSite(0, _RES_STAGE_WIDTHS[0], self.stem))
        self._site_input_shapes.append((cin, h, w))
        cin = _RES_STAGE_WIDTHS[0]
        self.blocks: list[_ResidualBlock] = []
        site = 1
        for stage, width in enumerate(_RES_STAGE_WIDTHS):
            for b in range(_RES_BLOCKS_PER_STAGE):
                stride = 2 if (stage > 0 and b == 0) else 1
                block = _ResidualBlock(cin, width, stride, site, rng)
                self.blocks.append(block)
                self._site_input_shapes.append((cin, h, w))
                h = (h + 2 - 3) // stride + 1
                w = (w + 2 - 3) // stride + 1
                self._site_input_shapes.append((width, h, w))
                self.sites.append(block.site1)
                self.sites.append(block.site2)
                site += 2
                cin = width
        self.fc = Linear(_RES_STAGE_WIDTHS[-1], spec.num_classes, rng)

    def _forward_impl(self, x, passports, train):
        h = self.stem.forward(x)
        h = self._apply_site(self.sites[0], h, passports, train)
        h = ad.relu(h)
        for block in self.blocks:
            identity = h if block.shortcut is None else block.shortcut.forward(h)
            out = block.conv1.forward(h)
            out = self._apply_site(block.site1, out, passports, train)
            out = ad.relu(out)
            out = block.conv2.forward(out)
            out = self._apply_site(block.site2, out, passports, train)
            h = ad.relu(out + identity)
        return self.fc.forward(ad.global_avg_pool(h))

    def _structure(self):
        yield "stem", self.stem
        yield "site0", self.sites[0]
        for b, block in enumerate(self.blocks):
            yield f"block{b}.conv1", block.conv1
            yield f"block{b}.conv2", block.conv2
            if block.shortcut is not None:
                yield f"block{b}.shortcut", block.shortcut
            yield f"site{1 + 2 * b}", block.site1
            yield f"site{2 + 2 * b}", block.site2
        yield "fc", self.fc


def build_model(spec: ModelSpec, seed: int):
    """Instantiate a model with He-uniform weights, deterministic under seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if spec.architecture == "toy_alexnet":
        model = ToyAlexNet(spec, rng)
    else:
        model = MiniResNet(spec, rng)
    for index in spec.passport_sites:
        model.sites[index].set_passport_mode()
    return model


def load_model(checkpoint: Checkpoint, spec: ModelSpec):
    model = build_model(spec, seed=checkpoint.seed)
    model.load_state(checkpoint)
    return model
