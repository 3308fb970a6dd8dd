"""Overlapping-letter segmentation toolkit.

End-to-end pieces for the proof of concept: ingest a labeled glyph
corpus, synthesize overlap datasets deterministically, train a small
from-scratch U-Net on per-class masks, and evaluate with pixel metrics
plus a max-flux outcome taxonomy.
"""

from .corpus import (LetterCorpus, LetterInstance, assign_splits,
                     binarize_mask, parse_corpus_csv)
from .errors import (ContentError, FormatError, GenerationError,
                     NumericError, OversegError)
from .estimator import OverlapSegmenter
from .evaluate import (EvalConfig, EvalReport, OutcomeRecord,
                       classify_outcome, flux_histogram, mask_max_fluxes,
                       minmax_scale, predict, render_panel, test_report)
from .nn import (UNetConfig, count_params, init_params, load_model,
                 param_shapes, save_model, unet_backward, unet_forward,
                 unet_forward_batch)
from .rng import Rng, derive_seed, splitmix64
from .synth import (Dataset, Sample, SynthConfig, add_gaussian_noise,
                    composite, generate_dataset, make_sample, read_dataset,
                    translate, write_dataset)
from .train import (AdamState, MetricsReport, TrainConfig, adam_init,
                    adam_step, bce_loss, evaluate_metrics, history_to_csv,
                    train)

__version__ = "0.1.0"

__all__ = [
    "LetterCorpus", "LetterInstance", "assign_splits", "binarize_mask",
    "parse_corpus_csv",
    "ContentError", "FormatError", "GenerationError", "NumericError",
    "OversegError",
    "OverlapSegmenter",
    "EvalConfig", "EvalReport", "OutcomeRecord", "classify_outcome",
    "flux_histogram", "mask_max_fluxes", "minmax_scale", "predict",
    "render_panel", "test_report",
    "UNetConfig", "count_params", "init_params", "load_model",
    "param_shapes", "save_model", "unet_backward", "unet_forward",
    "unet_forward_batch",
    "Rng", "derive_seed", "splitmix64",
    "Dataset", "Sample", "SynthConfig", "add_gaussian_noise", "composite",
    "generate_dataset", "make_sample", "read_dataset", "translate",
    "write_dataset",
    "AdamState", "MetricsReport", "TrainConfig", "adam_init", "adam_step",
    "bce_loss", "evaluate_metrics", "history_to_csv", "train",
    "__version__",
]
