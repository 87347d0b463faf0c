"""Koopman operators from trajectory data: spectra, basin discovery and stitching.

The subpackages follow the data flow::

    dynamics -> lifting -> edmd -> spectral -> discovery / stitching -> cli
"""
from .config import RunConfig, load_config
from .discovery import DiscoveryState, incorporate, initialize, novelty_test, run_discovery
from .dynamics import (
    SECOND_ORDER,
    TOGGLE_SWITCH,
    InitialConditionGrid,
    SystemSpec,
    Trajectory,
    get_system,
    grid_initial_conditions,
    simulate,
    simulate_batch,
)
from .edmd import KoopmanModel, build_pairs, fit, fit_trajectories, learning_error, predict
from .errors import (
    IntegrationError,
    KoopstitchError,
    NumericalError,
    PreconditionError,
    ValidationError,
)
from .lifting import Dictionary, build_dictionary, lift, lift_batch
from .spectral import (
    block_diagonalize,
    decompose,
    eigenfunction_field,
    extract_partition,
    unit_cluster_fields,
    unit_multiplicity,
)
from .stitching import StitchedModel, classify, stitch, stitched_lift, stitched_predict

__version__ = "0.1.0"
