"""delaytomo: per-link queueing-delay tomography from end-to-end probes.

Infers discrete per-link delay distributions (with loss atoms) on a
probing tree from end-to-end batch delays, via an exact message-passing
likelihood inside an EM loop with successive bin-size refinement.
Includes traceroute-style topology ingestion, a probe-batch simulator,
and Weibull-tail / Hurst-exponent analysis of the inferred
distributions.
"""

from .delay_model import (
    LOSS,
    DelayDistribution,
    DelaySupport,
    LinkParams,
    tv_distance,
)
from .topology import (
    HopPath,
    RawGraph,
    TopologyError,
    TreeTopology,
    build_trees,
    clone_shared_segments,
    compact_to_branching_tree,
    expand_leaf_paths,
    ingest_paths,
    load_forest,
    load_tree,
    parse_path_file,
    parse_path_line,
    random_branching_tree,
    regular_tree,
    save_forest,
    star_tree,
)
from .simulator import (
    LOST,
    ObservationSet,
    RawDelays,
    observations_to_raw,
    random_link_params,
    simulate_batch,
    simulate_experiment,
)
from .inference import (
    EMTrace,
    ZeroLikelihoodError,
    bin_observations,
    brute_force_em_step,
    brute_force_joint,
    brute_force_likelihood,
    doubling_schedule,
    downward_pass,
    em_step,
    joint_marginal,
    log_likelihood,
    observation_likelihood,
    run_em,
    successive_ml,
    upward_pass,
)
from .analysis import (
    CcdfCurve,
    WeibullFit,
    avg_delay_scaling_fit,
    ccdf_of,
    fit_weibull_tail,
    hurst_from_shape,
    mean_std_points,
    weibull_cv_prefactor,
)

__version__ = "0.1.0"
