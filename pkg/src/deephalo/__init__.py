"""Context-dependent discrete choice models with interaction-order control."""

__version__ = "0.1.0"

from .data import (
    ChoiceSet,
    Dataset,
    Observation,
    beverage_fixture,
    empirical_frequencies,
    gen_synthetic_simplex,
    load_featured_csv,
    load_featureless_csv,
    sample_choices,
    write_featureless_csv,
)
from .featured import CatalogSetModel, FeaturedModel
from .featureless import (
    FeaturelessModel,
    UtilityVector,
    choice_probabilities,
    max_interaction_order,
    required_depth_quadratic,
)
from .halo import (
    ContextEffectTable,
    RelativeHaloTable,
    export_heatmap,
    full_context_table,
    full_relative_table,
    identifiability_count,
    marginal_effect,
    reconstruct_utility,
    relative_halo,
)
from .training import (
    Metrics,
    TrainConfig,
    evaluate,
    mse_onehot_loss,
    nll_loss,
    rmse_vs_frequencies,
    train,
)

__all__ = [
    "ChoiceSet",
    "Dataset",
    "Observation",
    "beverage_fixture",
    "empirical_frequencies",
    "gen_synthetic_simplex",
    "load_featured_csv",
    "load_featureless_csv",
    "sample_choices",
    "write_featureless_csv",
    "CatalogSetModel",
    "FeaturedModel",
    "FeaturelessModel",
    "UtilityVector",
    "choice_probabilities",
    "max_interaction_order",
    "required_depth_quadratic",
    "ContextEffectTable",
    "RelativeHaloTable",
    "export_heatmap",
    "full_context_table",
    "full_relative_table",
    "identifiability_count",
    "marginal_effect",
    "reconstruct_utility",
    "relative_halo",
    "Metrics",
    "TrainConfig",
    "evaluate",
    "mse_onehot_loss",
    "nll_loss",
    "rmse_vs_frequencies",
    "train",
]
