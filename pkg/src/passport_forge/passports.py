"""Passport primitives: secret tensors, signatures, derived affine factors.

A passport is a pair of secret input-shaped tensors convolved with the host
layer's weights to produce the normalization scale and bias. Ownership is
encoded by training the signs of the derived scale factors to match a fixed
+-1 signature via a hinge penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DTYPE, Tensor, conv2d, global_avg_pool, mul, relu, sub
from .checkpoint import MAGIC_PASSPORT, FormatError, read_tensor_blob, write_tensor_blob


@dataclass
class Passport:
    """Secret scale/bias source tensors, shaped like the host conv's input map."""

    s_gamma: np.ndarray
    s_beta: np.ndarray

    def __post_init__(self):
        self.s_gamma = np.ascontiguousarray(self.s_gamma, dtype=DTYPE)
        self.s_beta = np.ascontiguousarray(self.s_beta, dtype=DTYPE)
        if self.s_gamma.shape != self.s_beta.shape:
            raise ValueError(
                f"passport halves must share a shape, got {self.s_gamma.shape} "
                f"vs {self.s_beta.shape}"
            )
        if self.s_gamma.ndim != 3:
            raise ValueError(f"passport tensors must be [C,H,W], got {self.s_gamma.shape}")
        if not (np.isfinite(self.s_gamma).all() and np.isfinite(self.s_beta).all()):
            raise ValueError("passport tensors must be finite")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.s_gamma.shape


@dataclass
class Signature:
    """Target +-1 bit sequence for the signs of one site's scale factors."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int8)
        if self.bits.ndim != 1 or self.bits.size == 0:
            raise ValueError(f"signature must be a non-empty 1-D array, got {self.bits.shape}")
        if not np.isin(self.bits, (-1, 1)).all():
            raise ValueError("signature bits must be -1 or +1")

    def __len__(self) -> int:
        return int(self.bits.size)


@dataclass
class EmbedHyper:
    """Hyperparameters for protected-model training."""

    alpha: float = 0.1
    margin: float = 0.1
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 6
    batch_size: int = 64

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


def random_passport(shape, seed, distribution: str = "normal") -> Passport:
    """Draw a fresh passport with i.i.d. entries, deterministic under seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if distribution == "normal":
        draw = lambda: rng.standard_normal(shape)
    elif distribution == "uniform":
        draw = lambda: rng.uniform(-1.0, 1.0, shape)
    else:
        raise ValueError(f"unknown passport distribution '{distribution}'")
    return Passport(s_gamma=draw().astype(DTYPE), s_beta=draw().astype(DTYPE))


def random_signature(length: int, seed) -> Signature:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=length).astype(np.int8) * 2 - 1
    return Signature(bits=bits)


def derive_affine(conv_weight: Tensor, passport: Passport, stride: int, padding: int):
    """Scale/bias vectors from convolving the passport with the host weights.

    Both halves run through the host conv (same stride/padding) and a global
    average pool. Differentiable w.r.t. the conv weight; the passport is a
    fixed constant.
    """
    cout, cin = conv_weight.shape[0], conv_weight.shape[1]
    if passport.s_gamma.shape[0] != cin:
        raise ValueError(
            f"passport has {passport.s_gamma.shape[0]} channels, conv expects {cin}"
        )
    gamma = global_avg_pool(
        conv2d(Tensor(passport.s_gamma[None]), conv_weight, stride, padding)
    ).reshape(cout)
    beta = global_avg_pool(
        conv2d(Tensor(passport.s_beta[None]), conv_weight, stride, padding)
    ).reshape(cout)
    return gamma, beta


def sign_loss(gamma: Tensor, signature: Signature, margin: float) -> Tensor:
    """Hinge penalty sum(max(0, margin - b_i * gamma_i)).

    Zero exactly when every scale factor carries its signature bit's sign
    with magnitude at least ``margin``.
    """
    if gamma.ndim != 1 or gamma.shape[0] != len(signature):
        raise ValueError(
            f"gamma length {gamma.shape} does not match signature length {len(signature)}"
        )
    target = Tensor(signature.bits.astype(DTYPE))
    return relu(sub(float(margin), mul(gamma, target))).sum()


# ---------------------------------------------------------------------------
# passport file format
# ---------------------------------------------------------------------------


def save_passports(
    path,
    passports: dict[int, Passport],
    signatures: dict[int, Signature],
    spec_hash: str,
    seed: int = 0,
) -> None:
    """Write per-site passports plus signatures to a PSPP1 container."""
    if set(passports) != set(signatures):
        raise ValueError("passports and signatures must cover the same sites")
    tensors = {}
    for site in sorted(passports):
        tensors[f"site{site}.s_gamma"] = passports[site].s_gamma
        tensors[f"site{site}.s_beta"] = passports[site].s_beta
    meta = {
        "spec_hash": spec_hash,
        "seed": seed,
        "signatures": {str(site): [int(b) for b in signatures[site].bits]
                       for site in sorted(signatures)},
    }
    Path(path).write_bytes(write_tensor_blob(MAGIC_PASSPORT, tensors, meta))


def load_passports(path) -> tuple[dict[int, Passport], dict[int, Signature], dict]:
    tensors, meta = read_tensor_blob(Path(path).read_bytes(), MAGIC_PASSPORT)
    sites: dict[int, dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        prefix, _, part = name.partition(".")
        if not prefix.startswith("site") or part not in ("s_gamma", "s_beta"):
            raise FormatError(f"unexpected tensor '{name}' in passport file")
        sites.setdefault(int(prefix[4:]), {})[part] = arr
    passports = {}
    for site, halves in sites.items():
        if set(halves) != {"s_gamma", "s_beta"}:
            raise FormatError(f"site {site} is missing a passport half")
        passports[site] = Passport(s_gamma=halves["s_gamma"], s_beta=halves["s_beta"])
    signatures = {
        int(site): Signature(bits=np.asarray(bits, dtype=np.int8))
        for site, bits in meta.get("signatures", {}).items()
    }
    if set(signatures) != set(passports):
        raise FormatError("signature metadata does not cover the stored passports")
    return passports, signatures, meta
