"""Adversarial feature augmentation for cross-domain few-shot classification.

A self-contained numpy implementation: reverse-mode autodiff core, a dual
stream encoder with per-channel perturbation layers trained adversarially
against a domain discriminator and a gram-matrix discrepancy, episodic heads,
procedural domain-shifted datasets, and a deterministic experiment harness.
"""
from .adversary import (
    LambdaSchedule,
    LossReport,
    adversarial_step,
    discriminate,
    domain_loss,
    gram_loss,
    init_discriminator,
    lambda_schedule,
    total_gram_loss,
)
from .data import (
    ClassSpec,
    DatasetManifest,
    DomainSpec,
    default_benchmark,
    gen_synthetic,
    ingest_csv,
    sample_episode,
    split_base_novel,
)
from .encoder import (
    AfaLayer,
    AfaParams,
    DualFeatures,
    EncoderConfig,
    EncoderParams,
    afa_apply,
    afa_apply_nonlinear,
    forward_dual,
    init_afa,
    init_encoder,
    pretrain_forward,
)
from .harness import (
    ExperimentConfig,
    TrialStats,
    run_ablation_suite,
    run_eval,
    run_gradcheck,
    run_meta_train,
    run_pretrain,
)
from .heads import (
    Episode,
    HeadKind,
    episode_accuracy,
    episode_loss,
    matching_head,
    proto_head,
    tpn_head,
)
from .optim import AdamState, adam_step, grad_check
from .rng import Rng
from .tensor import Tape, Tensor
from .tensor_io import load_tensor_file, save_tensor_file

__version__ = "0.1.0"
