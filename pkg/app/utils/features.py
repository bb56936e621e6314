"""
Cohort schema constants: the 45 observation features, their preprocessing
assignment, and the 5x5 treatment grid.

The clinical attribute list names 48 variables for a 45-wide observation. Three
are left out of the observation vector: max_dose_vaso and input_4hourly_tev
duplicate the treatment columns (vaso_raw, iv_raw), and cumulated_balance_tev
equals input_total_tev - output_total.
"""
from typing import NamedTuple, Tuple


class FeatureSpec(NamedTuple):
    name: str
    transform: str  # "standardize" or "log"
    healthy_mean: float
    severity_slope: float  # mean shift per latent severity level
    spread: float
    low: float  # plausible physiological range, used to clip emissions
    high: float
    static: bool = False  # drawn once per patient


FEATURE_CATALOG: Tuple[FeatureSpec, ...] = (
    FeatureSpec("age", "standardize", 64.0, 1.0, 15.0, 18.0, 91.0, static=True),
    FeatureSpec("Weight_kg", "standardize", 80.0, 0.0, 15.0, 35.0, 200.0, static=True),
    FeatureSpec("GCS", "standardize", 14.5, -1.2, 1.5, 3.0, 15.0),
    FeatureSpec("HR", "standardize", 85.0, 5.0, 12.0, 30.0, 200.0),
    FeatureSpec("SysBP", "standardize", 125.0, -7.0, 15.0, 50.0, 220.0),
    FeatureSpec("MeanBP", "standardize", 82.0, -4.5, 10.0, 30.0, 150.0),
    FeatureSpec("DiaBP", "standardize", 62.0, -3.0, 9.0, 20.0, 130.0),
    FeatureSpec("RR", "standardize", 17.0, 1.5, 4.0, 5.0, 50.0),
    FeatureSpec("Temp_C", "standardize", 37.0, 0.2, 0.7, 33.0, 42.0),
    FeatureSpec("FiO2_1", "standardize", 0.35, 0.07, 0.1, 0.21, 1.0),
    FeatureSpec("Potassium", "standardize", 4.0, 0.1, 0.5, 2.5, 7.0),
    FeatureSpec("Sodium", "standardize", 139.0, 0.3, 4.0, 120.0, 160.0),
    FeatureSpec("Chloride", "standardize", 104.0, 0.5, 5.0, 85.0, 130.0),
    FeatureSpec("Glucose", "standardize", 130.0, 8.0, 35.0, 40.0, 500.0),
    FeatureSpec("Magnesium", "standardize", 2.0, 0.02, 0.3, 1.0, 4.0),
    FeatureSpec("Calcium", "standardize", 8.4, -0.1, 0.6, 6.0, 11.0),
    FeatureSpec("Hb", "standardize", 10.5, -0.4, 1.6, 5.0, 17.0),
    FeatureSpec("WBC_count", "standardize", 11.0, 1.5, 5.0, 0.5, 60.0),
    FeatureSpec("Platelets_count", "standardize", 220.0, -20.0, 90.0, 10.0, 700.0),
    FeatureSpec("PTT", "standardize", 35.0, 3.0, 10.0, 20.0, 150.0),
    FeatureSpec("PT", "standardize", 14.0, 1.0, 3.0, 10.0, 60.0),
    FeatureSpec("Arterial_pH", "standardize", 7.40, -0.025, 0.06, 6.9, 7.7),
    FeatureSpec("paO2", "standardize", 120.0, -8.0, 40.0, 30.0, 500.0),
    FeatureSpec("paCO2", "standardize", 40.0, 0.0, 7.0, 20.0, 90.0),
    FeatureSpec("Arterial_BE", "standardize", 0.0, -1.5, 3.5, -25.0, 15.0),
    FeatureSpec("HCO3", "standardize", 24.0, -1.0, 3.5, 8.0, 45.0),
    FeatureSpec("Arterial_lactate", "standardize", 1.5, 0.7, 1.0, 0.3, 20.0),
    FeatureSpec("SOFA", "standardize", 3.0, 2.0, 1.5, 0.0, 24.0),
    FeatureSpec("SIRS", "standardize", 1.5, 0.3, 0.8, 0.0, 4.0),
    FeatureSpec("Shock_Index", "standardize", 0.7, 0.12, 0.15, 0.2, 3.0),
    FeatureSpec("PaO2_FiO2", "standardize", 330.0, -35.0, 90.0, 40.0, 700.0),
    FeatureSpec("Elixhauser", "standardize", 4.0, 0.5, 2.5, 0.0, 20.0, static=True),
    FeatureSpec("Albumin", "standardize", 3.1, -0.2, 0.5, 1.0, 5.0),
    FeatureSpec("CO2_mEqL", "standardize", 24.0, -0.8, 3.5, 8.0, 45.0),
    FeatureSpec("Ionised_Ca", "standardize", 1.13, -0.02, 0.08, 0.7, 1.5),
    FeatureSpec("SpO2", "log", 97.0, -0.8, 2.0, 70.0, 100.0),
    FeatureSpec("BUN", "log", 20.0, 6.0, 10.0, 2.0, 150.0),
    FeatureSpec("Creatinine", "log", 1.1, 0.35, 0.6, 0.2, 12.0),
    FeatureSpec("SGOT", "log", 40.0, 25.0, 40.0, 5.0, 3000.0),
    FeatureSpec("SGPT", "log", 35.0, 18.0, 35.0, 5.0, 3000.0),
    FeatureSpec("Total_bili", "log", 0.8, 0.5, 0.8, 0.1, 30.0),
    FeatureSpec("INR", "log", 1.2, 0.15, 0.3, 0.8, 8.0),
    FeatureSpec("input_total_tev", "log", 2500.0, 900.0, 1500.0, 0.0, 30000.0),
    FeatureSpec("output_total", "log", 1800.0, -150.0, 900.0, 0.0, 15000.0),
    FeatureSpec("output_4hourly", "log", 250.0, -35.0, 120.0, 0.0, 2000.0),
)

FEATURE_NAMES: Tuple[str, ...] = tuple(spec.name for spec in FEATURE_CATALOG)
N_FEATURES = len(FEATURE_NAMES)
FEATURE_COLUMNS: Tuple[str, ...] = tuple(f"f_{j:02d}" for j in range(N_FEATURES))

# 5x5 grid: index = 5 * iv_bin + vaso_bin
N_DOSE_BINS = 5
N_ACTIONS = N_DOSE_BINS * N_DOSE_BINS

# Gating inputs: seven clinical attributes plus two history descriptors
GATING_CLINICAL_FEATURES: Tuple[str, ...] = ("age", "Elixhauser", "SOFA", "FiO2_1", "BUN", "GCS", "Albumin")
GATING_FEATURE_NAMES: Tuple[str, ...] = GATING_CLINICAL_FEATURES + ("trajectory_length", "max_neighbor_distance")


def feature_index(name: str) -> int:
    """Column of a named attribute in the observation vector"""
    return FEATURE_NAMES.index(name)


def action_index(iv_bin, vaso_bin):
    """Grid action of dose bins; works elementwise on arrays"""
    return N_DOSE_BINS * iv_bin + vaso_bin


def action_bins(action: int) -> Tuple[int, int]:
    """(iv_bin, vaso_bin) of a grid action"""
    return divmod(int(action), N_DOSE_BINS)
