"""Search over bilinear scoring-function structures for knowledge-graph embedding."""

from .kg import DataError, FilterIndex, ParseError, TripleStore, build_filter_index, generate_synthetic_kg, load_dataset
from .predictor import Predictor, predictor_fit, predictor_rank, srf_features
from .scoring import EmbeddingStore, HyperParams, score_all_heads, score_all_tails, score_path, score_triple
from .search import SearchConfig, SearchEngine, SearchRecord, evolutionary_search, progressive_search, random_search
from .structure import (
    InvalidArgument,
    StructureMatrix,
    builtin_structure,
    canonical_key,
    equivalence_orbit,
    expressiveness_witnesses,
    filter_check,
    is_degenerate,
)
from .training import EvalReport, NumericError, TrainReport, batch_loss, evaluate, train_structure

__version__ = "0.1.0"
