"""Event-driven simulation of spatially structured coalescents on 2-D tori.

The package couples three layers:

* forward-in-time population models on the torus (individual-based and a
  grid-discretized type-frequency field),
* the dual genealogical process: a spatial coalescent whose blocks carry
  torus locations and merge through local reproduction events,
* direct samplers for the limiting coalescents (Kingman, multiple-merger,
  and the spatially labelled limit) together with the statistical
  experiments that compare simulation against the limiting laws.
"""

__version__ = "0.1.0"

from slfv.coalescent import (
    Block,
    CoalescenceTimeout,
    GenealogyEvent,
    GenealogyRecord,
    LabelledPartition,
    ReplayCouplingError,
    SampleConfig,
    draw_sample,
    read_event_log,
    replay_genealogy,
    rescale_time_and_space,
    restrict,
    simulate_genealogy,
    write_event_log,
)
from slfv.config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    validate_tree,
)
from slfv.events import (
    AdmissibilityError,
    EventClass,
    EventLaw,
    ImpactKernel,
    LambdaMeasure,
    RadiusMeasure,
    check_admissibility,
    dispersal_variance,
    lambda_beta_c_rate,
    nonspatial_lambda_rate,
    pair_coalescence_rate,
    single_lineage_jump_rate,
)
from slfv.forward import (
    DualityReport,
    IndividualPopulation,
    TypeField,
    confidence_interval,
    duality_check,
    empirical_density,
    read_field_binary,
    run_forward,
    step_individual_model,
    step_type_field,
    write_field_binary,
    write_field_csv,
)
from slfv.geometry import (
    TorusPoint,
    TorusSpec,
    canonical_point,
    lens_area,
    torus_ball_volume,
    torus_distance,
    uniform_in_ball,
    uniform_on_torus,
)
from slfv.limits import (
    LabelledLimitPath,
    PartitionPath,
    ks_exponential,
    sample_kingman,
    sample_lambda_beta_c,
    sample_spatial_limit,
)
from slfv.runner import (
    PlotDataError,
    emit_plotdata,
    replicate_generator,
    run,
)
from slfv.validation import (
    PowerLaw,
    RegimeClass,
    RegimeSpec,
    UncoveredRegimeError,
    block_count_experiment,
    classify_regime,
    first_merger_distribution,
    first_merger_expected,
    hitting_time_experiment,
    pair_time_experiment,
    predicted_timescale,
    short_window_entrance,
    single_lineage_variance,
    weakly_decreasing,
)

__all__ = [
    "AdmissibilityError",
    "Block",
    "CoalescenceTimeout",
    "ConfigError",
    "DualityReport",
    "EventClass",
    "EventLaw",
    "ExperimentConfig",
    "GenealogyEvent",
    "GenealogyRecord",
    "ImpactKernel",
    "IndividualPopulation",
    "LabelledLimitPath",
    "LabelledPartition",
    "LambdaMeasure",
    "PartitionPath",
    "PlotDataError",
    "PowerLaw",
    "RadiusMeasure",
    "RegimeClass",
    "RegimeSpec",
    "ReplayCouplingError",
    "SampleConfig",
    "TorusPoint",
    "TorusSpec",
    "TypeField",
    "UncoveredRegimeError",
    "block_count_experiment",
    "canonical_point",
    "check_admissibility",
    "classify_regime",
    "confidence_interval",
    "dispersal_variance",
    "draw_sample",
    "duality_check",
    "emit_plotdata",
    "empirical_density",
    "first_merger_distribution",
    "first_merger_expected",
    "hitting_time_experiment",
    "ks_exponential",
    "lambda_beta_c_rate",
    "lens_area",
    "load_config",
    "nonspatial_lambda_rate",
    "pair_coalescence_rate",
    "pair_time_experiment",
    "predicted_timescale",
    "read_event_log",
    "read_field_binary",
    "replay_genealogy",
    "replicate_generator",
    "rescale_time_and_space",
    "restrict",
    "run",
    "run_forward",
    "sample_kingman",
    "sample_lambda_beta_c",
    "sample_spatial_limit",
    "short_window_entrance",
    "simulate_genealogy",
    "single_lineage_jump_rate",
    "single_lineage_variance",
    "step_individual_model",
    "step_type_field",
    "torus_ball_volume",
    "torus_distance",
    "uniform_in_ball",
    "uniform_on_torus",
    "validate_tree",
    "weakly_decreasing",
    "write_event_log",
    "write_field_binary",
    "write_field_csv",
]
