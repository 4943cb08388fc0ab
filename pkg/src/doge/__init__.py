"""Domain reweighting with generalization estimation, at desk scale."""

from .core import (DogeHyperparams, GeneralizationScores, WeightTrajectory, average_weights,
                   generalization_scores, influence_decomposition, run_proxy_ood, run_proxy_universal,
                   stage_average, update_domain_weights)
from .data import DomainCorpus, ingest, mixture_batch, uniform_domain_batch
from .model import Transformer, TransformerConfig
from .synthetic import SyntheticSpec, generate_synthetic

__version__ = "0.1.0"
