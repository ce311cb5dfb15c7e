"""Imposter rejection for open-set speaker identification on stored embeddings."""

from .core import COSINE, EnrollmentSet, centroid, cosine_similarity, identify, l2_normalize
from .corpus import Corpus
from .errors import ConfigError, DataError, FormatError, ImposterIdError
from .evaluation import (
    FixedCosine,
    FixedRelNet,
    IdnRelNet,
    ScoreNorm,
    SstCosine,
    SstRelNet,
    build_speaker_set,
    evaluate_method,
    make_trials,
)
from .thresholding import (
    Decision,
    ThresholdTable,
    TrialPair,
    adaptive_score_norm,
    compute_eer,
    identify_fixed,
    identify_sst,
    optimal_fixed_threshold,
    speaker_specific_thresholds,
)
from .training import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "COSINE",
    "ConfigError",
    "Corpus",
    "DataError",
    "Decision",
    "EnrollmentSet",
    "FixedCosine",
    "FixedRelNet",
    "FormatError",
    "IdnRelNet",
    "ImposterIdError",
    "ScoreNorm",
    "SstCosine",
    "SstRelNet",
    "ThresholdTable",
    "TrainConfig",
    "TrialPair",
    "adaptive_score_norm",
    "build_speaker_set",
    "centroid",
    "compute_eer",
    "cosine_similarity",
    "evaluate_method",
    "identify",
    "identify_fixed",
    "identify_sst",
    "l2_normalize",
    "make_trials",
    "optimal_fixed_threshold",
    "run_training",
    "speaker_specific_thresholds",
]
