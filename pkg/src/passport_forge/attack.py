"""Fully-connected-substitution ambiguity attack on passport layers.

The attacker holds a passport-free checkpoint and a small data budget. Each
passport site is replaced by a plain normalization whose scale factors are
routed through a trainable expansion block with a skip connection:

* IERB: one tiny per-channel perceptron, channels stay isolated.
* CERB: one shared perceptron over all channels, coupling every channel.

Only the substituted scale/bias factors and block weights are trained; all
convolution and linear weights stay frozen, and the normalization uses the
checkpoint's stored running statistics throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import DTYPE, SGD, Tensor, leaky_relu, matmul, sigmoid, sign_pm1, tanh
from .checkpoint import Checkpoint
from .data import Dataset
from .metrics import bdr
from .models import ModelSpec, NormMode, build_model
from .passports import Passport, Signature, derive_affine
from .seeding import SeedStreams
from .training import _epoch_pass, evaluate_accuracy

BLOCK_KINDS = ("cerb", "ierb", "plain")
ACTIVATIONS = ("leaky_relu", "tanh", "sigmoid")


class AttackError(RuntimeError):
    """Attack precondition or contract violation."""


class PassportLeakError(AttackError):
    """Checkpoint offered to the attacker contains passport secrets."""


def _activate(h: Tensor, activation: str, slope: float) -> Tensor:
    if activation == "leaky_relu":
        return leaky_relu(h, slope)
    if activation == "tanh":
        return tanh(h)
    if activation == "sigmoid":
        return sigmoid(h)
    raise ValueError(f"unknown activation '{activation}'")


@dataclass
class IERBParams:
    """Per-channel two-layer perceptron weights: C isolated 1->h->1 maps."""

    w1: Tensor  # [C, h]
    b1: Tensor  # [C, h]
    w2: Tensor  # [C, h]
    b2: Tensor  # [C]

    @classmethod
    def create(cls, channels: int, hidden: int, rng: np.random.Generator) -> "IERBParams":
        return cls(
            w1=Tensor(rng.normal(0.0, 0.01, (channels, hidden)).astype(DTYPE), True),
            b1=Tensor(np.zeros((channels, hidden), DTYPE), True),
            w2=Tensor(np.zeros((channels, hidden), DTYPE), True),
            b2=Tensor(np.zeros(channels, DTYPE), True),
        )

    @classmethod
    def zeros(cls, channels: int, hidden: int) -> "IERBParams":
        return cls.create(channels, hidden, _ZeroRng())

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    def named_tensors(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


@dataclass
class CERBParams:
    """One shared perceptron over all C channels; hidden width max(1, C//8)."""

    weights: list[Tensor]  # [C->h], (h->h)*, [h->C]
    biases: list[Tensor]

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, depth: int = 2,
               hidden: int | None = None) -> "CERBParams":
        if depth < 2:
            raise ValueError("block depth must be >= 2")
        h = max(1, channels // 8) if hidden is None else hidden
        dims = [channels] + [h] * (depth - 1) + [channels]
        weights, biases = [], []
        for i in range(depth):
            din, dout = dims[i], dims[i + 1]
            final = i == depth - 1
            w = np.zeros((din, dout), DTYPE) if final else \
                rng.normal(0.0, 0.01, (din, dout)).astype(DTYPE)
            weights.append(Tensor(w, True))
            biases.append(Tensor(np.zeros(dout, DTYPE), True))
        return cls(weights=weights, biases=biases)

    @classmethod
    def zeros(cls, channels: int, depth: int = 2, hidden: int | None = None) -> "CERBParams":
        return cls.create(channels, _ZeroRng(), depth, hidden)

    @property
    def channels(self) -> int:
        return self.weights[0].shape[0]

    def named_tensors(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i + 1}", w))
            out.append((f"b{i + 1}", b))
        return out


class _ZeroRng:
    """Stand-in rng that draws zeros; used for exact-identity blocks."""

    def normal(self, loc, scale, size):
        return np.zeros(size)


def ierb_forward(gamma: Tensor, params: IERBParams, slope: float = 0.01,
                 activation: str = "leaky_relu") -> Tensor:
    """Per-channel expansion with skip: g''_i = w2_i . act(w1_i g_i + b1_i) + b2_i + g_i."""
    c = params.channels
    if gamma.shape != (c,):
        raise ValueError(f"gamma shape {gamma.shape} does not match block channels {c}")
    hidden = gamma.reshape(c, 1) * params.w1 + params.b1
    hidden = _activate(hidden, activation, slope)
    return (hidden * params.w2).sum(axis=1) + params.b2 + gamma


def cerb_forward(gamma: Tensor, params: CERBParams, slope: float = 0.01,
                 activation: str = "leaky_relu") -> Tensor:
    """Shared expansion with skip; every output channel sees every input channel."""
    c = params.channels
    if gamma.shape != (c,):
        raise ValueError(f"gamma shape {gamma.shape} does not match block channels {c}")
    h = gamma
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = _activate(matmul(h, w) + b, activation, slope)
    return matmul(h, params.weights[-1]) + params.biases[-1] + gamma


def cerb_forward_rows(rows: Tensor, params: CERBParams, slope: float = 0.01,
                      activation: str = "leaky_relu") -> Tensor:
    """CERB applied independently to each row of a [n, C] matrix."""
    c = params.channels
    if rows.ndim != 2 or rows.shape[1] != c:
        raise ValueError(f"rows shape {rows.shape} does not match block channels {c}")
    h = rows
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = _activate(matmul(h, w) + b, activation, slope)
    return matmul(h, params.weights[-1]) + params.biases[-1] + rows


class _SiteBlock:
    """Binds block parameters and the activation choice to one norm site."""

    def __init__(self, params, slope: float, activation: str):
        self.params = params
        self.slope = slope
        self.activation = activation

    def forward(self, gamma: Tensor) -> Tensor:
        if isinstance(self.params, IERBParams):
            return ierb_forward(gamma, self.params, self.slope, self.activation)
        return cerb_forward(gamma, self.params, self.slope, self.activation)

    def forward_rows(self, rows: Tensor) -> Tensor:
        if isinstance(self.params, IERBParams):
            raise AttackError("row-wise expansion is only defined for shared blocks")
        return cerb_forward_rows(rows, self.params, self.slope, self.activation)

    def named_tensors(self):
        return self.params.named_tensors()


@dataclass
class AttackConfig:
    """Knobs of the substitution attack loop."""

    block: str = "cerb"
    activation: str = "leaky_relu"
    mlp_depth: int = 2
    ierb_hidden: int = 10
    slope: float = 0.01
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    data_fraction: float = 0.1
    epsilon: float = 0.05      # max allowed accuracy gap vs the authorized model
    delta_bdr: float = 0.2     # min required per-site sign dissimilarity
    num_blocks: int | None = None  # blocks on the first n passport sites; rest direct

    def __post_init__(self):
        if self.block not in BLOCK_KINDS:
            raise ValueError(f"block must be one of {BLOCK_KINDS}, got '{self.block}'")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.mlp_depth < 2:
            raise ValueError("mlp_depth must be >= 2")
        if self.block == "ierb" and self.mlp_depth != 2:
            raise ValueError("ierb blocks are fixed at depth 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must lie in (0, 1]")


@dataclass
class AttackOutcome:
    model: object
    checkpoint: Checkpoint
    substitutes: dict[int, tuple[np.ndarray, np.ndarray]]
    history: list[dict]
    final: dict = field(default_factory=dict)


def check_no_passport_leak(checkpoint: Checkpoint, spec: ModelSpec) -> None:
    """Refuse checkpoints that carry passport secrets or passport-derived affine."""
    for name in checkpoint.names():
        if "s_gamma" in name or "s_beta" in name or "passport" in name:
            raise PassportLeakError(f"checkpoint contains passport secret '{name}'")
        for site in spec.passport_sites:
            if name in (f"site{site}.gamma", f"site{site}.beta"):
                raise PassportLeakError(
                    f"checkpoint contains passport-derived affine '{name}'"
                )


def prepare_attack_model(checkpoint: Checkpoint, spec: ModelSpec, config: AttackConfig):
    """Load frozen weights and substitute every passport site per the config.

    Substituted sites become ordinary trainable normalization layers (batch
    statistics during attack optimization, running buffers refreshed); every
    other site keeps its checkpoint statistics frozen along with the weights.
    """
    if not spec.passport_sites:
        raise AttackError("spec has no passport sites to substitute")
    check_no_passport_leak(checkpoint, spec)
    model = build_model(spec, seed=checkpoint.seed)
    model.load_state(checkpoint)
    rng = SeedStreams(config.seed).stream("attack-block-init")
    for site in model.sites:
        site.stats_frozen = True
    for position, index in enumerate(spec.passport_sites):
        site = model.sites[index]
        wants_block = config.block != "plain" and (
            config.num_blocks is None or position < config.num_blocks
        )
        block = None
        if wants_block:
            if config.block == "ierb":
                params = IERBParams.create(site.channels, config.ierb_hidden, rng)
            else:
                params = CERBParams.create(site.channels, rng, depth=config.mlp_depth)
            block = _SiteBlock(params, config.slope, config.activation)
        site.set_attack_mode(block)
        site.stats_frozen = False
    attacked = {f"site{i}." for i in spec.passport_sites}
    for name, param in model.named_parameters().items():
        param.requires_grad = any(name.startswith(prefix) for prefix in attacked)
    return model


def recalibrate_stats(model, dataset: Dataset, batch_size: int = 256,
                      passes: int = 2) -> None:
    """Re-estimate running statistics of the substituted (unfrozen) sites.

    Runs forward-only passes with a cumulative-average momentum schedule, the
    standard normalization recalibration an attacker performs before shipping.
    Frozen sites and all parameters are untouched.
    """
    sites = [s for s in model.sites if not s.stats_frozen]
    if not sites:
        return
    saved = [s.momentum for s in sites]
    for s in sites:
        s.running_mean[:] = 0.0
        s.running_var[:] = 0.0
    try:
        step = 0
        for _ in range(passes):
            for start in range(0, len(dataset), batch_size):
                step += 1
                for s in sites:
                    s.momentum = 1.0 / step
                x = Tensor(dataset.images[start : start + batch_size])
                model.forward(x, None, train=True)
    finally:
        for s, momentum in zip(sites, saved):
            s.momentum = momentum


def extract_substitute(model) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Final per-site substitute (scale, bias); the blocks are no longer needed.

    Substituting these as plain affine factors reproduces the attacked model's
    logits exactly, because attack-mode normalization is deterministic.
    """
    out = {}
    for site in model.sites:
        if site.mode is not NormMode.ATTACK:
            continue
        gamma, beta = site.affine(None)
        out[site.index] = (gamma.data.copy(), beta.data.copy())
    if not out:
        raise AttackError("model has no substituted norm sites to extract from")
    return out


def substitute_plain(checkpoint: Checkpoint, spec: ModelSpec,
                     substitutes: dict[int, tuple[np.ndarray, np.ndarray]]):
    """Plain-affine model using extracted substitutes at the former passport sites.

    Pass the attacked checkpoint so the refreshed normalization statistics come
    along; in eval mode the result reproduces the attacked model's logits.
    """
    model = build_model(spec.without_passports(), seed=checkpoint.seed)
    model.load_state(checkpoint, partial=True)
    for index, (gamma, beta) in substitutes.items():
        site = model.sites[index]
        site.gamma.data[...] = gamma
        site.beta.data[...] = beta
    return model


def _site_bdrs(model, reference: dict[int, Signature]) -> dict[int, float]:
    subs = extract_substitute(model)
    return {
        index: bdr(subs[index][0], reference[index].bits.astype(DTYPE))
        for index in subs
        if index in reference
    }


def run_attack(checkpoint: Checkpoint, spec: ModelSpec, attack_data: Dataset,
               config: AttackConfig, eval_data: Dataset | None = None,
               reference_signatures: dict[int, Signature] | None = None,
               authorized_acc: float | None = None,
               eval_every: int = 1) -> AttackOutcome:
    """Train substituted affine factors and block weights on the attacker's data.

    ``reference_signatures`` and ``authorized_acc`` are harness-side inputs
    used only for reporting (per-epoch BDR, success judgement); the attack
    itself never sees passport secrets. ``eval_every=0`` skips the per-epoch
    test evaluation and reports accuracy only at the end.
    """
    model = prepare_attack_model(checkpoint, spec, config)
    trainable = model.trainable_parameters()
    optimizer = SGD(trainable, config.lr, config.momentum)
    shuffle = SeedStreams(config.seed).stream("attack-shuffle")
    history: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        mean_loss = _epoch_pass(model, attack_data, None, optimizer,
                                config.batch_size, shuffle, context="attack")
        row = {"epoch": epoch, "train_loss": mean_loss}
        if eval_data is not None and eval_every and epoch % eval_every == 0:
            row["test_acc"] = evaluate_accuracy(model, eval_data)
        if reference_signatures:
            for index, value in _site_bdrs(model, reference_signatures).items():
                row[f"bdr_site{index}"] = value
        history.append(row)

    if config.epochs:
        recalibrate_stats(model, attack_data, batch_size=max(config.batch_size, 128))
    substitutes = extract_substitute(model)
    final: dict = {}
    if eval_data is not None:
        final["acc"] = evaluate_accuracy(model, eval_data)
    if reference_signatures:
        site_bdrs = _site_bdrs(model, reference_signatures)
        final["bdr_per_site"] = site_bdrs
        final["bdr_mean"] = float(np.mean(list(site_bdrs.values())))
        if authorized_acc is not None and "acc" in final:
            final["acc_gap"] = abs(final["acc"] - authorized_acc)
            final["definition1_success"] = bool(
                final["acc_gap"] <= config.epsilon
                and min(site_bdrs.values()) >= config.delta_bdr
            )
    attacked_checkpoint = model.to_checkpoint(seed=config.seed, epoch=config.epochs)
    return AttackOutcome(model=model, checkpoint=attacked_checkpoint,
                         substitutes=substitutes, history=history, final=final)


def plain_attack(checkpoint: Checkpoint, spec: ModelSpec, attack_data: Dataset,
                 config: AttackConfig, **kwargs) -> AttackOutcome:
    """Baseline without expansion blocks: optimize the affine factors directly."""
    return run_attack(checkpoint, spec, attack_data, replace(config, block="plain"),
                      **kwargs)


def sign_flip_sweep(checkpoint: Checkpoint, spec: ModelSpec,
                    passports: dict[int, Passport], train_data: Dataset,
                    flip_counts: list[int], seed: int, epochs: int, lr: float,
                    momentum: float = 0.9, batch_size: int = 64,
                    eval_data: Dataset | None = None) -> list[dict]:
    """Existence probe for substitute passports, run by someone holding them.

    For each k: negate k randomly chosen authorized scale factors, fine-tune
    only the affine factors on the full training data, and report the final
    accuracy plus the sign coincidence with the authorized scales.
    """
    if len(spec.passport_sites) != 1:
        raise AttackError("the sign-flip sweep expects a model with exactly one passport site")
    index = spec.passport_sites[0]
    probe = build_model(spec, seed=checkpoint.seed)
    probe.load_state(checkpoint)
    site = probe.sites[index]
    gamma_auth, beta_auth = derive_affine(site.host_conv.weight, passports[index],
                                          site.host_conv.stride, site.host_conv.padding)
    gamma_auth = gamma_auth.data.copy()
    beta_auth = beta_auth.data.copy()
    channels = len(gamma_auth)
    if any(k < 0 or k > channels for k in flip_counts):
        raise ValueError(f"flip counts must lie in [0, {channels}]")

    flip_rng = SeedStreams(seed).stream("sign-flips")
    results = []
    for k in flip_counts:
        model = build_model(spec, seed=checkpoint.seed)
        model.load_state(checkpoint)
        for site in model.sites:
            site.stats_frozen = True
        target = model.sites[index]
        target.set_attack_mode(None)
        target.stats_frozen = False
        flipped = gamma_auth.copy()
        if k:
            chosen = flip_rng.choice(channels, size=k, replace=False)
            flipped[chosen] *= -1.0
        target.gamma.data[...] = flipped
        target.beta.data[...] = beta_auth
        for name, param in model.named_parameters().items():
            param.requires_grad = name.startswith(f"site{index}.")
        if epochs:
            optimizer = SGD(model.trainable_parameters(), lr, momentum)
            shuffle = SeedStreams(seed).stream(f"sweep-shuffle-{k}")
            for _ in range(epochs):
                _epoch_pass(model, train_data, None, optimizer, batch_size, shuffle,
                            context=f"sign-flip fine-tune (k={k})")
        acc = evaluate_accuracy(model, eval_data if eval_data is not None else train_data)
        coincidence = float(np.mean(
            sign_pm1(target.gamma.data) == sign_pm1(gamma_auth), dtype=np.float64
        ))
        results.append({"flips": int(k), "acc": acc, "coincidence": coincidence})
    return results
