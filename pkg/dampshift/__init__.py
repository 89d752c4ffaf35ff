from . import netcase
from . import powerflow
from . import dae
from . import smallsignal
from . import tracking
from . import ilp
from . import studies

DampshiftError = netcase.DampshiftError
SystemCase = netcase.SystemCase
load_case = netcase.load_case
solve_power_flow = powerflow.solve_power_flow
ModelFidelity = dae.ModelFidelity
nominal_operating_point = dae.nominal_operating_point
initialize_equilibrium = dae.initialize_equilibrium
linearize = smallsignal.linearize
finite_spectrum = smallsignal.finite_spectrum
spectrum_of = smallsignal.spectrum_of
metrics = smallsignal.metrics
generalized_sensitivity = smallsignal.generalized_sensitivity
participation_factors = smallsignal.participation_factors
Tracking = tracking.Tracking
Scenario = ilp.Scenario
IlpConfig = ilp.IlpConfig
run_ilp = ilp.run_ilp
min_load_shedding = ilp.min_load_shedding
tune_pss_gain = ilp.tune_pss_gain
cli_main = studies.cli_main
