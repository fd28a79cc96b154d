"""Tractable lookahead engine.

A hybrid surrogate for autoregressive sequence models: an HMM decoder with
exact conditional queries over continuations, optionally driven by a
trained neural prior over its hidden state, used for constrained
generation with one batched surrogate update per decode step.
"""

from .dfa import Dfa, KeywordSpec, accept_all_dfa, build_keyword_dfa, dfa_step, product
from .encoder import EncoderHead, TrainConfig, encode_prior, encoder_grad, hybrid_loglik, train_encoder
from .errors import (
    ImpossibleObservation,
    LtlaError,
    SizeGuardExceeded,
    StateCapExceeded,
    TrainingDiverged,
    UnsatisfiableAtStep,
)
from .hmm import (
    Belief,
    HmmParams,
    Vocabulary,
    continuation_loglik,
    filter_prefix,
    forward_step,
    joint_loglik,
    sample_sequence,
)
from .lookahead import (
    FactorizedClassifier,
    LookaheadTable,
    QuerySpec,
    precompute_classifier_table,
    precompute_dfa_table,
    query_event_prob,
    query_positional,
)
from .monarch import MonarchMatrix, materialize, row_normalize

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
