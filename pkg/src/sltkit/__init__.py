"""Singular learning theory toolkit: losses, information criteria, free energies and RLCTs."""

from .criteria import (
    CriteriaReport,
    criteria_report,
    cumulant,
    estimate_nu,
    free_energy_ti,
    generalization_loss,
    loocv,
    mle_fit,
    sbic,
    training_loss,
    waic,
    wbic,
)
from .renormalized import (
    ChartGrid,
    XiField,
    check_partial_integration,
    chi,
    functional_identity_check,
    renorm_expectation,
    sample_xi,
)
from .rlct import (
    NormalCrossingChart,
    RlctResult,
    estimate_rlct_volume,
    estimate_rlct_wbic,
    rlct_of_charts,
    rlct_product,
    rlct_sum,
)
from .sampler import ChainSet, McmcConfig, SamplerError, diagnostics, posterior_expectation, run_mcmc
from .zoo import (
    Dataset,
    ModelSpec,
    UndefinedLossError,
    conjugate_normal,
    empirical_loss,
    gaussian_mixture2,
    generate_data,
    make_model,
    product_mean,
    regular_gaussian,
)

__version__ = "0.1.0"
