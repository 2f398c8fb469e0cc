"""Speculative-ensemble decoding with a simulated-cost verification harness."""

__version__ = "0.1.0"

from .core import (
    Distribution,
    EnsembleKind,
    EnsembleSpec,
    LogitsVec,
    RandomSource,
    Vocabulary,
    contrastive_ensemble,
    ensemble,
    general_weighted_ensemble,
    sample,
    tv_distance,
    weighted_ensemble,
)
from .decoding import (
    DecodeConfig,
    DecodeTrace,
    Step,
    Strategy,
    Verification,
    alternate_proposal_decode,
    decode,
    make_decoder,
    n_model_se_decode,
    spec_ensemble_decode,
    vanilla_ensemble_decode,
    vanilla_sd_decode,
)
from .errors import SpecEnsError
from .models import (
    EnsembleModel,
    LanguageModel,
    NGramModel,
    TableModel,
    load_table_model,
    random_table_model,
    save_table_model,
    train_ngram,
)

__all__ = [
    "__version__",
    "Distribution", "EnsembleKind", "EnsembleSpec", "LogitsVec", "RandomSource", "Vocabulary",
    "contrastive_ensemble", "ensemble", "general_weighted_ensemble", "sample", "tv_distance",
    "weighted_ensemble",
    "DecodeConfig", "DecodeTrace", "Step", "Strategy", "Verification", "alternate_proposal_decode",
    "decode", "make_decoder", "n_model_se_decode", "spec_ensemble_decode", "vanilla_ensemble_decode",
    "vanilla_sd_decode",
    "SpecEnsError",
    "EnsembleModel", "LanguageModel", "NGramModel", "TableModel", "load_table_model",
    "random_table_model", "save_table_model", "train_ngram",
]
