"""Networks of averaged operators: certificates, fixed points, equilibria and training."""

from .activations import ActivationSpec, catalog, kinds, make_activation, verify_row
from .equilibrium import ConvexSet, LayerGameState, NashReport, pocs_demo, verify_nash
from .federated import AggregationRule, Client, FederatedTopology, ServerModel, aggregate, run_rounds
from .gram_schmidt import best_linear_predictor, gs_network_run, idempotence_check, project
from .llm import AttentionHead, DecoderBlock, attention_layer, decoder_fixpoint, layer_norm, masked_softmax
from .network import IterationTrace, LayerSpec, NetworkSpec, contraction_mode, fejer_check, km_iterate, layer
from .operators import (
    AveragedOperator,
    AveragedReport,
    GammaCertificate,
    NotCertifiableError,
    check_averaged,
    compose,
    estimate_gamma,
    promote_lipschitz,
    sample_pairs,
    weighted_sum,
)
from .prox import conjugate, moreau_envelope, prox_eval
from .training import TrainingProblem, dual_gradient_check, train, vi_residual

__version__ = "0.1.0"

__all__ = [
    "ActivationSpec", "catalog", "kinds", "make_activation", "verify_row",
    "ConvexSet", "LayerGameState", "NashReport", "pocs_demo", "verify_nash",
    "AggregationRule", "Client", "FederatedTopology", "ServerModel", "aggregate", "run_rounds",
    "best_linear_predictor", "gs_network_run", "idempotence_check", "project",
    "AttentionHead", "DecoderBlock", "attention_layer", "decoder_fixpoint", "layer_norm", "masked_softmax",
    "IterationTrace", "LayerSpec", "NetworkSpec", "contraction_mode", "fejer_check", "km_iterate", "layer",
    "AveragedOperator", "AveragedReport", "GammaCertificate", "NotCertifiableError", "check_averaged",
    "compose", "estimate_gamma", "promote_lipschitz", "sample_pairs", "weighted_sum",
    "conjugate", "moreau_envelope", "prox_eval",
    "TrainingProblem", "dual_gradient_check", "train", "vi_residual",
]
