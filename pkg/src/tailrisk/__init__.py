"""State-dependent equity tail-risk toolkit.

Pipeline pieces: drawdown-style market stress classification from
volume/volatility-weighted returns, regime-split crash-event logits with
month-clustered inference, left-tail conditional quantile regression with a
stratified month-block bootstrap, and cross-fitted double machine learning
with in-package learners (lasso, random forest, gradient boosting). A
synthetic-data lab certifies the estimators and a batch CLI runs the whole
pipeline off a panel CSV.
"""

from .crash import (
    CrashConfig,
    LogitFit,
    crash_indicator,
    fit_logit,
    fit_regime_logits,
    odds_ratios,
    quintile_gap,
    threshold_sweep,
)
from .dml import (
    DmlConfig,
    DmlEstimate,
    crossfit_residuals,
    dml_cell,
    dml_matrix,
    final_stage,
    pillar_matrix,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateOutcomeError,
    PanelFormatError,
    RankDeficientError,
    TailriskError,
)
from .panel import (
    PanelDataset,
    compute_excess_returns,
    derive_controls,
    filter_by_missing_rate,
    lag_columns,
    load_panel_csv,
    standardize_controls,
)
from .quantile import (
    QuantileFit,
    QuantileSpec,
    fit_quantile,
    pinball_loss,
    quantile_table,
    stratified_month_block_bootstrap,
)
from .regime import RegimeSeries, build_regime, classify_stress, regime_summary
from .simulate import (
    DgpSpec,
    SimResult,
    generate_panel,
    monte_carlo,
    prepare_pipeline,
    spec_from_dict,
    state_dependence_study,
)

__version__ = "0.1.0"

__all__ = [
    "CrashConfig",
    "LogitFit",
    "crash_indicator",
    "fit_logit",
    "fit_regime_logits",
    "odds_ratios",
    "quintile_gap",
    "threshold_sweep",
    "DmlConfig",
    "DmlEstimate",
    "crossfit_residuals",
    "dml_cell",
    "dml_matrix",
    "final_stage",
    "pillar_matrix",
    "ConfigError",
    "ConvergenceError",
    "DegenerateOutcomeError",
    "PanelFormatError",
    "RankDeficientError",
    "TailriskError",
    "PanelDataset",
    "compute_excess_returns",
    "derive_controls",
    "filter_by_missing_rate",
    "lag_columns",
    "load_panel_csv",
    "standardize_controls",
    "QuantileFit",
    "QuantileSpec",
    "fit_quantile",
    "pinball_loss",
    "quantile_table",
    "stratified_month_block_bootstrap",
    "RegimeSeries",
    "build_regime",
    "classify_stress",
    "regime_summary",
    "DgpSpec",
    "SimResult",
    "generate_panel",
    "monte_carlo",
    "prepare_pipeline",
    "spec_from_dict",
    "state_dependence_study",
    "__version__",
]
