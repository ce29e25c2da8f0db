"""Individualized treatment rules for clustered data with within-cluster spillovers."""
from .crossfit import CrossfitError, CrossfitResult, CrossfitSpec, crossfit_evaluate, make_folds
from .data import (Cluster, ClusterDataset, ConstantPolicy, CsvSchema, DatasetError, DimensionMismatchError,
                   EmptyDatasetError, InvalidTreatmentError, LinearPolicy, MissingColumnError, MissingValueError,
                   Policy, PolicyAssignment, RaggedRowError, TreePolicy, assign, load_dataset, load_policy,
                   policy_assignment, policy_from_dict, save_dataset, save_policy)
from .estimators import (NuisanceConfig, NuisanceError, NuisanceFit, SigmaInverse, ValueEstimate, evaluate,
                         fit_nuisance, ghat_unit, sigma_inverse_closed_form, value_addipw, value_addipw_via_matrix,
                         value_dr, value_ipw_nointerference, value_ipw_standard, value_polyipw, value_with_cost)
from .learning import (EnumerationTooLarge, LearnedPolicy, LearningError, LearnSpec, RegretBoundInputs,
                       compute_regret_bound, learn, learn_ipw_standard_surrogate, learn_linear_exact,
                       learn_linear_surrogate)
from .propensity import (FittedLogistic, KnownConstant, KnownTable, PositivityError, PropensityFitConfig,
                         PropensityFitError, PropensityModel, cluster_propensity, fit_propensity,
                         individual_propensity, propensity_error_metric)
from .simulation import (EvaluateProtocol, LearnProtocol, OraclePool, ReplicationError, ReplicationReport,
                         ScenarioSpec, generate_dataset, regret_curve, run_replications, true_value_mc)

__version__ = "0.1.0"
