"""Inverse-probability-weighted GEE for clustered SMARTs with finite-sample
sandwich adjustments, a trial simulator and a Monte Carlo harness."""

from .covariance import IccMode, Structure, VarianceMode, WorkingCovariance
from .data import (
    PATHWAYS,
    REGIMENS,
    ClusterRecord,
    DataFormatError,
    EmbeddedAI,
    TrialDataset,
    consistency_indicator,
    load_csv,
    pathway_of,
    validate_design,
    write_csv,
)
from .gee import ConvergenceError, DesignError, FitConfig, FitResult, RankDeficiencyError, fit
from .inference import effect_contrasts, interval, pairwise_contrast, report
from .sandwich import PRESETS, FsaConfig, SandwichResult, SingularLeverageError, resolve_fsa, variant_name
from .simgen import GenerativeSpec, SimulationDesign, generate_trial, spec_from_design
from .weights import KNOWN, WeightEngine, fit_weights

__version__ = "0.1.0"
