"""Published values from the BRFSS 2022 ACE application, entered verbatim.

The microdata are not shipped, so these serve as fixtures for set
arithmetic and output formats only.
"""

# item order: ACEDEPRS ACESUB ACEPRISN ACEDIVRC ACEPUNCH ACEHURT1 ACESWEAR ACESEX ACEADSAF ACEADNED
BIN_CORNERS = [
    (1, 0, 0, 0, 0, 0, 0, 0, 0, 0),
    (0, 1, 0, 1, 0, 0, 1, 1, 0, 0),
]

FREQ_CORNERS = [
    (1, 0, 0, 0, 0, 0, 2, 1, 0, 0),
    (1, 1, 1, 1, 0, 0, 0, 2, 0, 0),
    (1, 1, 0, 1, 0, 1, 1, 2, 0, 0),
    (1, 1, 0, 0, 0, 0, 2, 0, 1, 0),
    (1, 1, 1, 0, 0, 0, 0, 2, 1, 0),
    (1, 1, 0, 1, 0, 0, 0, 2, 1, 0),
    (1, 0, 0, 1, 1, 1, 2, 0, 2, 0),
    (1, 0, 1, 0, 1, 2, 2, 0, 2, 0),
    (1, 1, 1, 0, 1, 1, 2, 0, 0, 1),
    (1, 1, 0, 1, 0, 1, 0, 2, 0, 1),
    (1, 0, 1, 0, 0, 1, 2, 0, 1, 1),
    (1, 0, 0, 1, 0, 1, 2, 0, 2, 1),
    (1, 0, 0, 0, 0, 2, 2, 0, 2, 1),
    (0, 1, 0, 1, 1, 1, 2, 2, 1, 0),
    (0, 1, 0, 1, 1, 0, 2, 2, 2, 0),
    (0, 1, 0, 1, 1, 0, 2, 2, 1, 1),
    (0, 1, 0, 1, 0, 2, 2, 2, 2, 1),
]

BINARY_COVERED = 544
LIFTED_COVERED = 18_000
REP_COVERED = 6_166
FREQ_GRID_SIZE = 32_400

# screening table, cutoff >= 7 and replicable subgroup (rounded as printed)
CUTOFF7 = {"ppr": 0.08, "sensitivity": 0.19, "specificity": 0.95, "ppv": 0.49, "npv": 0.83}
SUBGROUP = {"ppr": 0.09, "sensitivity": 0.24, "specificity": 0.95, "ppv": 0.53, "npv": 0.84}
RELATIVE_GAIN_PCT = 26

REAL_DATA_COUNTS = {
    "rejected_before_closure": 77,
    "screened_candidates": 4_616,
    "screened_reduction_pct": 85.8,
    "flagged_binary": 9_842,
    "n_respondents": 49_547,
    "flagged_binary_pct": 19.9,
    "flagged_replicable": 4_364,
}

TIER_ORDER = (
    ("ACEDEPRS", "ACESEX", "ACESWEAR"),
    ("ACESUB", "ACEPRISN", "ACEADSAF", "ACEHURT1"),
    ("ACEADNED", "ACEDIVRC", "ACEPUNCH"),
)
