"""Training loops for baseline and protected models, plus ownership checks."""

from __future__ import annotations

import numpy as np

from .autodiff import SGD, Tape, Tensor, backward, cross_entropy, sign_pm1
from .checkpoint import Checkpoint
from .data import Dataset
from .metrics import accuracy
from .models import ModelSpec, build_model, load_model
from .passports import EmbedHyper, Passport, Signature, derive_affine, sign_loss
from .seeding import SeedStreams


class TrainingDiverged(RuntimeError):
    """Loss left the finite range; aborting with context."""


def minibatches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield (images Tensor, labels array) batches, shuffled when an rng is given."""
    n = len(ds)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Tensor(ds.images[idx]), ds.labels[idx]


def evaluate_accuracy(model, ds: Dataset, passports=None, batch_size: int = 256) -> float:
    hits = 0
    for x, y in minibatches(ds, batch_size):
        logits = model.forward(x, passports, train=False)
        hits += int((np.argmax(logits.data, axis=1) == y).sum())
    return hits / len(ds)


def _epoch_pass(model, ds, passports, optimizer, batch_size, rng, loss_extra=None,
                context: str = "training", train_mode: bool = True):
    """One optimization epoch; returns the mean minibatch loss.

    ``train_mode=False`` keeps normalization on stored running statistics
    (the attacker's setting); parameters still receive gradients.
    """
    total, batches = 0.0, 0
    for x, y in minibatches(ds, batch_size, rng):
        with Tape() as tape:
            logits = model.forward(x, passports, train=train_mode)
            loss = cross_entropy(logits, y)
            if loss_extra is not None:
                loss = loss + loss_extra()
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"{context}: loss became non-finite ({value})")
        backward(loss, tape)
        optimizer.step()
        total += value
        batches += 1
    return total / max(batches, 1)


def train_baseline(spec: ModelSpec, train_data: Dataset, hyper: EmbedHyper, seed: int,
                   eval_data: Dataset | None = None):
    """Train an unprotected model (all norm sites use plain learnable affine)."""
    if spec.passport_sites:
        raise ValueError("baseline training expects a spec without passport sites")
    model = build_model(spec, seed)
    optimizer = SGD(model.trainable_parameters(), hyper.lr, hyper.momentum,
                    hyper.weight_decay)
    shuffle = SeedStreams(seed).stream("shuffle")
    history = []
    for epoch in range(1, hyper.epochs + 1):
        mean_loss = _epoch_pass(model, train_data, None, optimizer,
                                hyper.batch_size, shuffle, context="baseline")
        row = {"epoch": epoch, "train_loss": mean_loss}
        if eval_data is not None:
            row["test_acc"] = evaluate_accuracy(model, eval_data)
        history.append(row)
    return model.to_checkpoint(seed=seed, epoch=hyper.epochs), history


def train_protected(spec: ModelSpec, passports: dict[int, Passport],
                    signatures: dict[int, Signature], train_data: Dataset,
                    hyper: EmbedHyper, seed: int, eval_data: Dataset | None = None):
    """Embed passports: task loss plus the per-site sign hinge on derived scales."""
    sites = set(spec.passport_sites)
    if set(passports) != sites or set(signatures) != sites:
        raise ValueError(
            f"need one passport and signature per passport site {sorted(sites)}"
        )
    model = build_model(spec, seed)
    for index in sites:
        if len(signatures[index]) != model.site_channels(index):
            raise ValueError(
                f"signature at site {index} has {len(signatures[index])} bits, "
                f"site has {model.site_channels(index)} channels"
            )
    optimizer = SGD(model.trainable_parameters(), hyper.lr, hyper.momentum,
                    hyper.weight_decay)
    shuffle = SeedStreams(seed).stream("shuffle")

    def embed_penalty():
        penalty = None
        for index in sorted(sites):
            term = sign_loss(model.site_gammas[index], signatures[index], hyper.margin)
            penalty = term if penalty is None else penalty + term
        return penalty * hyper.alpha

    history = []
    for epoch in range(1, hyper.epochs + 1):
        mean_loss = _epoch_pass(model, train_data, passports, optimizer,
                                hyper.batch_size, shuffle, loss_extra=embed_penalty,
                                context="protected training")
        row = {"epoch": epoch, "train_loss": mean_loss,
               "sign_match": _sign_match(model, passports, signatures)}
        if eval_data is not None:
            row["test_acc"] = evaluate_accuracy(model, eval_data, passports)
        history.append(row)
    return model.to_checkpoint(seed=seed, epoch=hyper.epochs), history


def _derived_gammas(model, passports) -> dict[int, np.ndarray]:
    out = {}
    for index in model.spec.passport_sites:
        site = model.sites[index]
        gamma, _ = derive_affine(site.host_conv.weight, passports[index],
                                 site.host_conv.stride, site.host_conv.padding)
        out[index] = gamma.data
    return out


def _sign_match(model, passports, signatures) -> float:
    matches, total = 0, 0
    for index, gamma in _derived_gammas(model, passports).items():
        bits = signatures[index].bits
        matches += int((sign_pm1(gamma) == bits).sum())
        total += len(bits)
    return matches / max(total, 1)


def verify(checkpoint: Checkpoint, spec: ModelSpec, passports: dict[int, Passport],
           signatures: dict[int, Signature], test_data: Dataset,
           acc_threshold: float = 0.5) -> dict:
    """Ownership check: every derived sign matches and accuracy clears the bar."""
    missing = set(spec.passport_sites) - set(passports)
    if missing:
        raise ValueError(f"missing passports for sites {sorted(missing)}")
    model = load_model(checkpoint, spec)
    acc = evaluate_accuracy(model, test_data, passports)
    per_site = {}
    matches, total = 0, 0
    for index, gamma in _derived_gammas(model, passports).items():
        bits = signatures[index].bits
        site_match = int((sign_pm1(gamma) == bits).sum())
        per_site[index] = site_match / len(bits)
        matches += site_match
        total += len(bits)
    sign_match = matches / max(total, 1)
    return {
        "acc": acc,
        "sign_match": sign_match,
        "pass": bool(sign_match == 1.0 and acc >= acc_threshold),
        "per_site_sign_match": per_site,
        "acc_threshold": acc_threshold,
    }
