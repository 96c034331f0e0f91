"""Passport-layer DNN ownership protection and its substitution-based
ambiguity attack, at desk scale."""

from .autodiff import (SGD, AutodiffError, ShapeError, Tape, Tensor, backward,
                       batch_norm2d, bce_with_logits, conv2d, cross_entropy,
                       global_avg_pool, leaky_relu, matmul, mean, relu, reshape,
                       sigmoid, sign_pm1, tanh, tensor_sum, transpose)
from .checkpoint import Checkpoint, FormatError
from .data import (Dataset, DatasetFormatError, disjoint_split, load_cifar10,
                   load_dataset, load_mnist, make_synthetic_dataset, subset,
                   synth_images, write_cifar10, write_mnist)
from .metrics import MetricsRecord, accuracy, bdr, sdr
from .models import (MissingPassportError, ModelSpec, NormMode, SpecError,
                     build_model, load_model, num_norm_sites, parse_passport_sites)
from .passports import (EmbedHyper, Passport, Signature, derive_affine,
                        load_passports, random_passport, random_signature,
                        save_passports, sign_loss)
from .attack import (AttackConfig, AttackError, AttackOutcome, CERBParams,
                     IERBParams, PassportLeakError, cerb_forward, extract_substitute,
                     ierb_forward, plain_attack, prepare_attack_model, run_attack,
                     sign_flip_sweep, substitute_plain)
from .training import (TrainingDiverged, evaluate_accuracy, train_baseline,
                       train_protected, verify)
from .watermark import (WeightWatermarkKey, cerb_attack_watermark, extract_bits,
                        make_key, uchida_embed, uchida_extract)
from .seeding import SeedStreams, seed_everything

__version__ = "0.1.0"
