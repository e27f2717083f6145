"""Predictive probability of success for trials with competing event outcomes.

Typical use::

    from crppos import load_dataset, StratumSpec, PposConfig, RiskRatioAnalysis, run_ppos

    data = load_dataset("interim.csv")
    strata = [StratumSpec(cause, arm, "weibull") for cause in (1, 2) for arm in (0, 1)]
    result = run_ppos(data, PposConfig(strata, (RiskRatioAnalysis(eval_time=60.0),), K=2500))
"""

from .analysis import (BayesPhAnalysis, CifEstimate, Criterion, DecisionRule, RiskRatioAnalysis, RiskRatioResult,
                       aalen_johansen, bayes_ph_graduation, evaluate_rule, risk_ratio_test)
from .dataset import (CompetingRiskDataset, DatasetError, Schema, SubjectRecord, administrative_censor,
                      load_dataset, partition_interim, save_dataset, stack)
from .fitting import ConvergenceError, FittedModel, StratumSpec, fit_models, fit_stratum
from .hazards import (CauseModelSet, ModelError, PchCsModel, PchPriors, WeibullCsModel, WeibullPriors, cif,
                      cum_hazard, hazard, log_likelihood)
from .ppos import (HorizonGrid, PposConfig, PposResult, PriorGrid, ReplicateValidityError, mc_standard_error,
                   run_ppos, run_scenarios)
from .priors import Beta, Exponential, Flat, Normal, RandomWalk1
from .sampler import PosteriorDraws, SamplerConfig, SamplerError, sample_posterior
from .simulate import CensoringRule, EnrollmentSpec, draw_event_time, predict_final_dataset, simulate_outcomes
from .synthetic import CovariateGen, SyntheticSpec, generate_synthetic

__version__ = "0.1.0"
