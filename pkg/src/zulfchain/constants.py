"""Physical constants and the default gyromagnetic-ratio table."""

PLANCK = 6.62607015e-34  # J s
BOLTZMANN = 1.380649e-23  # J / K

# gamma / 2pi in MHz/T; spin files may override entries
GYROMAGNETIC_RATIOS = {
    "1H": 42.577,
    "13C": 10.708,
    "15N": -4.316,
}
CONSTANTS_TABLE_VERSION = "gamma-2024.1"

AMBIENT_TEMPERATURE = 298.0  # K

# field that puts the bare 1H Larmor frequency at exactly 700 MHz
FIELD_700MHZ = 700.0 / GYROMAGNETIC_RATIOS["1H"]
FIELD_CYCLING_HIGH = 9.4
SHUTTLE_FIELD = 50e-6
EVOLUTION_FIELD = 50e-9
