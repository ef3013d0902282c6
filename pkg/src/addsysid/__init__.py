"""Continuous-time identification of additive MIMO systems.

Stage one estimates an additive model ``sum_i B_i(p)/A_i(p)`` from sampled
data by refined instrumental variables, in open or closed loop. Stage two
projects that estimate onto a structured (for example modal) description.
"""

from .benchmark import (
    BenchmarkSpec,
    McConfig,
    McResultTable,
    build_three_mass,
    calibrate_snr,
    default_controller,
    emit_results,
    gen_noise,
    run_monte_carlo,
    simulate_dataset,
)
from .closed_loop import (
    DiscreteController,
    control_sensitivity,
    noiseless_input,
    simulate_closed_loop,
)
from .errors import NumericError, SysIdError, ValidationError
from .estimators import ModalProjector, RivEstimator
from .lti import (
    AdditiveModel,
    StateSpace,
    Subsystem,
    filter_sampled,
    simulate_additive,
    zoh_equivalent_dtf,
)
from .riv import (
    EstimatorOptions,
    RivResult,
    SampledDataset,
    align_submodels,
    asymptotic_covariance,
    init_from_orders,
    riv_solve,
    riv_step,
)
from .structured import (
    ModalMap,
    ModalParams,
    general_covariance,
    modal_eval,
    modal_init,
    modal_jacobian,
    project,
)

__version__ = "0.1.0"
