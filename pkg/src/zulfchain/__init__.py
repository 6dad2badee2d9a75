"""Spin-dynamics simulation of high-field and zero- to ultralow-field NMR of molecular spin chains."""

__version__ = "0.1.0"

from .constants import CONSTANTS_TABLE_VERSION, GYROMAGNETIC_RATIOS
from .spins import BlockOperator, EquivalenceGroup, Isotope, Spin, SpinSystem, magnetization_sectors
from .hamiltonian import EigenSystem, HamiltonianSpec, block_decompose, build_total_hamiltonian, diagonalize
from .dynamics import (
    DensityMatrix,
    EigenCache,
    ProtocolSchedule,
    adiabatic_ramp,
    canonical_schedule,
    propagate,
    run_protocol,
    thermal_state,
)
from .spectra import (
    Spectrum1D,
    Spectrum2D,
    TimeSeries,
    highfield_spectrum,
    indirect_j_series,
    pick_peaks,
    process_1d,
    zulf_stick_spectrum,
)
from .tocsy import tocsy2d
from .fitting import FitParameterSet, FitResult, fit, residual
from .io import parse_spin_file, read_spin_file

__all__ = [
    "CONSTANTS_TABLE_VERSION",
    "GYROMAGNETIC_RATIOS",
    "BlockOperator",
    "EquivalenceGroup",
    "Isotope",
    "Spin",
    "SpinSystem",
    "magnetization_sectors",
    "EigenSystem",
    "HamiltonianSpec",
    "block_decompose",
    "build_total_hamiltonian",
    "diagonalize",
    "DensityMatrix",
    "EigenCache",
    "ProtocolSchedule",
    "adiabatic_ramp",
    "canonical_schedule",
    "propagate",
    "run_protocol",
    "thermal_state",
    "Spectrum1D",
    "Spectrum2D",
    "TimeSeries",
    "highfield_spectrum",
    "indirect_j_series",
    "pick_peaks",
    "process_1d",
    "zulf_stick_spectrum",
    "tocsy2d",
    "FitParameterSet",
    "FitResult",
    "fit",
    "residual",
    "parse_spin_file",
    "read_spin_file",
]
