"""Few-shot salient-object dataset synthesis from a class-conditional generator.

A toy pipeline: procedural corpus, conditional generator with a feature pyramid,
diffusion-regularized image embedding, few-shot mask branch, quality filter,
synthetic dataset factory, and a saliency evaluation battery.
"""
__version__ = "0.1.0"

from .corpus import Corpus, Entry, StatsReport, build_corpus, corpus_stats, generate_scene
from .diffusion import (DiffusionSchedule, EmbeddingNet, FewShotPair, FewShotSet, build_fewshot_set,
                        diffusion_step, loss_adversarial_recon, loss_variational, make_schedule, q_sample,
                        reverse_step, train_den)
from .errors import (ConfigError, CorruptDatasetError, DependencyError, EmptyInputError, FilterTooStrictError,
                     InvalidArgumentError, MissingClassError, SodganError)
from .generator import GeneratorNet, ReconDiscriminator, discriminate_real, generate, sample_latent, train_generator
from .maskgen import (ClassificationHead, MaskGeneratorNet, OAFFModule, apply_attention, classify_pixels,
                      fuse_features, generate_mask, loss_adversarial_g, loss_supervised, omni_attention,
                      train_maskgen)
from .metrics import MetricReport, auc, emit_plots, evaluate, f_measure_curve, mae, pr_curve, s_measure
from .quality import FilterPolicy, QualityNet, filter_pool, score_pair, train_dq
from .saliency import SaliencyNet, train_saliency
from .synthesis import SynthDataset, dataset_stats, read_dataset, synthesize_dataset

__all__ = [
    "ClassificationHead", "ConfigError", "Corpus", "CorruptDatasetError", "DependencyError",
    "DiffusionSchedule", "EmbeddingNet", "EmptyInputError", "Entry", "FewShotPair", "FewShotSet",
    "FilterPolicy", "FilterTooStrictError", "GeneratorNet", "InvalidArgumentError", "MaskGeneratorNet",
    "MetricReport", "MissingClassError", "OAFFModule", "QualityNet", "ReconDiscriminator", "SaliencyNet",
    "SodganError", "StatsReport", "SynthDataset", "apply_attention", "auc", "build_corpus",
    "build_fewshot_set", "classify_pixels", "corpus_stats", "dataset_stats", "diffusion_step",
    "discriminate_real", "emit_plots", "evaluate", "f_measure_curve", "filter_pool", "fuse_features",
    "generate", "generate_mask", "generate_scene", "loss_adversarial_g", "loss_adversarial_recon",
    "loss_supervised", "loss_variational", "mae", "make_schedule", "omni_attention", "pr_curve",
    "q_sample", "read_dataset", "reverse_step", "s_measure", "sample_latent", "score_pair",
    "synthesize_dataset", "train_dq", "train_den", "train_generator", "train_maskgen", "train_saliency",
]
