"""Weight-regularizer watermark (projection + sigmoid + BCE) and its
block-substitution ambiguity attack.

Embedding regularizes sigmoid(X . mean_kernel) of one conv layer toward a
bit string. The attack reparametrizes that layer's kernels through a shared
expansion block with a skip connection, then trains only the target layer
and the block to carry a fresh signature while the task loss holds accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import (DTYPE, SGD, Tensor, bce_with_logits, matmul)
from .checkpoint import (MAGIC_WATERMARK_KEY, Checkpoint, FormatError,
                         read_tensor_blob, write_tensor_blob)
from .data import Dataset
from .metrics import sdr
from .models import ModelSpec, build_model
from .passports import EmbedHyper
from .attack import AttackConfig, AttackError, _SiteBlock, CERBParams
from .seeding import SeedStreams
from .training import _epoch_pass, evaluate_accuracy


@dataclass
class WeightWatermarkKey:
    """Secret projection matrix, target bit string, and target conv layer."""

    projection: np.ndarray  # [n_bits, d], d = flattened kernel size of the layer
    bits: np.ndarray        # [n_bits] in {0, 1}
    layer: int

    def __post_init__(self):
        self.projection = np.ascontiguousarray(self.projection, dtype=DTYPE)
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.projection.ndim != 2:
            raise ValueError(f"projection must be 2-D, got {self.projection.shape}")
        if self.bits.shape != (self.projection.shape[0],):
            raise ValueError("bits length must match projection rows")
        if not np.isin(self.bits, (0, 1)).all():
            raise ValueError("bits must be 0/1")

    def save(self, path) -> None:
        meta = {"bits": [int(b) for b in self.bits], "layer": self.layer}
        Path(path).write_bytes(
            write_tensor_blob(MAGIC_WATERMARK_KEY, {"projection": self.projection}, meta)
        )

    @classmethod
    def load(cls, path) -> "WeightWatermarkKey":
        tensors, meta = read_tensor_blob(Path(path).read_bytes(), MAGIC_WATERMARK_KEY)
        if "projection" not in tensors:
            raise FormatError("watermark key file lacks a projection tensor")
        return cls(projection=tensors["projection"],
                   bits=np.asarray(meta["bits"], dtype=np.uint8),
                   layer=int(meta["layer"]))


def make_key(spec: ModelSpec, layer: int, n_bits: int, seed: int) -> WeightWatermarkKey:
    model = build_model(spec, seed=0)
    _, conv = model.get_conv(layer)
    d = int(np.prod(conv.weight.shape[1:]))
    rng = SeedStreams(seed).stream("wm-key")
    projection = rng.standard_normal((n_bits, d)).astype(DTYPE)
    bits = rng.integers(0, 2, size=n_bits).astype(np.uint8)
    return WeightWatermarkKey(projection=projection, bits=bits, layer=layer)


def _mean_kernel(weight: Tensor) -> Tensor:
    cout = weight.shape[0]
    return weight.reshape(cout, -1).mean(axis=0)


def _wm_logits(weight: Tensor, key: WeightWatermarkKey) -> Tensor:
    mean_kernel = _mean_kernel(weight)
    if mean_kernel.shape[0] != key.projection.shape[1]:
        raise ValueError(
            f"key dimension {key.projection.shape[1]} does not match layer "
            f"kernel size {mean_kernel.shape[0]}"
        )
    return matmul(Tensor(key.projection), mean_kernel)


def uchida_embed(spec: ModelSpec, train_data: Dataset, key: WeightWatermarkKey,
                 lambda_wm: float, hyper: EmbedHyper, seed: int,
                 eval_data: Dataset | None = None):
    """Train a plain model with the watermark regularizer on the target layer."""
    if spec.passport_sites:
        raise ValueError("watermark embedding expects a spec without passport sites")
    model = build_model(spec, seed)
    _, conv = model.get_conv(key.layer)
    targets = key.bits.astype(DTYPE)
    optimizer = SGD(model.trainable_parameters(), hyper.lr, hyper.momentum,
                    hyper.weight_decay)
    shuffle = SeedStreams(seed).stream("shuffle")

    def penalty():
        return bce_with_logits(_wm_logits(conv.weight, key), targets) * float(lambda_wm)

    history = []
    for epoch in range(1, hyper.epochs + 1):
        mean_loss = _epoch_pass(model, train_data, None, optimizer, hyper.batch_size,
                                shuffle, loss_extra=penalty if lambda_wm else None,
                                context="watermark embedding")
        row = {
            "epoch": epoch,
            "train_loss": mean_loss,
            "sdr": sdr(extract_bits(conv.weight.data, key), key.bits),
        }
        if eval_data is not None:
            row["test_acc"] = evaluate_accuracy(model, eval_data)
        history.append(row)
    return model.to_checkpoint(seed=seed, epoch=hyper.epochs), history


def extract_bits(weight: np.ndarray, key: WeightWatermarkKey) -> np.ndarray:
    """Deterministic extraction: bit_i = 1 iff sigmoid(X_i . mean_kernel) > 0.5."""
    w = np.asarray(weight, dtype=DTYPE)
    mean_kernel = w.reshape(w.shape[0], -1).mean(axis=0)
    if mean_kernel.shape[0] != key.projection.shape[1]:
        raise ValueError(
            f"key dimension {key.projection.shape[1]} does not match weight "
            f"kernel size {mean_kernel.shape[0]}"
        )
    return (key.projection @ mean_kernel > 0).astype(np.uint8)


def uchida_extract(checkpoint: Checkpoint, spec: ModelSpec,
                   key: WeightWatermarkKey) -> np.ndarray:
    model = build_model(spec, seed=0)
    name, _ = model.get_conv(key.layer)
    tensor_name = f"{name}.weight"
    if tensor_name not in checkpoint.tensors:
        raise ValueError(f"checkpoint lacks tensor '{tensor_name}'")
    return extract_bits(checkpoint.tensors[tensor_name], key)


def cerb_attack_watermark(checkpoint: Checkpoint, spec: ModelSpec,
                          attack_data: Dataset, new_key: WeightWatermarkKey,
                          config: AttackConfig, lambda_wm: float = 5.0,
                          eval_data: Dataset | None = None,
                          original_key: WeightWatermarkKey | None = None) -> dict:
    """Forge a fresh watermark by reparametrizing the embedded layer's kernels.

    Only the target layer's weights and the expansion block are trained; the
    attacked checkpoint ships the block's output as the new layer weights, so
    every other tensor stays bit-identical.
    """
    model = build_model(spec, seed=checkpoint.seed)
    model.load_state(checkpoint)
    name, conv = model.get_conv(new_key.layer)
    d = int(np.prod(conv.weight.shape[1:]))
    if new_key.projection.shape[1] != d:
        raise ValueError("new key does not match the target layer dimensions")

    rng = SeedStreams(config.seed).stream("wm-attack-block")
    block = _SiteBlock(
        CERBParams.create(d, rng, depth=config.mlp_depth),
        config.slope, config.activation,
    )

    def transform(weight: Tensor) -> Tensor:
        cout = weight.shape[0]
        flat = weight.reshape(cout, -1)
        expanded = block.forward_rows(flat)
        return expanded.reshape(weight.shape)

    conv.weight_transform = transform

    target_prefix = f"{name}."
    for pname, param in model.named_parameters().items():
        param.requires_grad = pname.startswith(target_prefix)
    trainable = dict(model.trainable_parameters())
    for bname, tensor in block.named_tensors():
        trainable[f"wm_block.{bname}"] = tensor

    targets = new_key.bits.astype(DTYPE)

    def penalty():
        return bce_with_logits(
            _wm_logits(conv.effective_weight(), new_key), targets
        ) * float(lambda_wm)

    optimizer = SGD(trainable, config.lr, config.momentum)
    shuffle = SeedStreams(config.seed).stream("wm-attack-shuffle")
    history = []
    for epoch in range(1, config.epochs + 1):
        mean_loss = _epoch_pass(model, attack_data, None, optimizer, config.batch_size,
                                shuffle, loss_extra=penalty, context="watermark attack",
                                train_mode=False)
        history.append({"epoch": epoch, "train_loss": mean_loss})

    effective = conv.effective_weight().data.copy()
    attacked_tensors = checkpoint.tensors.copy()
    attacked_tensors[f"{name}.weight"] = effective
    attacked = Checkpoint(tensors=attacked_tensors, spec_hash=checkpoint.spec_hash,
                          seed=config.seed, epoch=config.epochs)

    report: dict = {
        "history": history,
        "sdr_new": sdr(extract_bits(effective, new_key), new_key.bits),
        "target_tensor": f"{name}.weight",
    }
    if eval_data is not None:
        report["acc"] = evaluate_accuracy(model, eval_data)
    if original_key is not None:
        extracted = extract_bits(effective, original_key)
        report["bdr_extracted_vs_original"] = float(
            np.mean(extracted != original_key.bits, dtype=np.float64)
        )
        same_bits = (len(new_key.bits) == len(original_key.bits)
                     and np.array_equal(new_key.bits, original_key.bits))
        report["bdr_chosen_vs_original"] = (
            0.0 if same_bits else float(
                np.mean(new_key.bits != original_key.bits, dtype=np.float64)
            ) if len(new_key.bits) == len(original_key.bits) else float("nan")
        )
        report["degenerate"] = bool(same_bits)
        if same_bits:
            report["valid_ambiguity"] = False
    frozen_ok = all(
        np.array_equal(attacked_tensors[n], checkpoint.tensors[n])
        for n in checkpoint.tensors
        if n != f"{name}.weight"
    )
    report["frozen_audit_ok"] = bool(frozen_ok)
    return attacked, report
