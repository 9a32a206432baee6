# ---------------------------------------------------------------------------
# Benchmark configuration defaults — these are the factory definitions.
# A config file (key=value lines) and CLI flags override them; see
# services/settings.py for parsing and validation.
#
# Distortions are RMSE in pixel levels (0–255 scale) everywhere.
# ---------------------------------------------------------------------------
BENCH_CONFIG_DEFAULT: dict[str, object] = {
    # Model: "train" builds one from the synthetic settings below, anything else
    # is read as a checkpoint path.
    "model":                "train",
    # Test set: "synthetic", or a directory holding labels.csv + P6 files.
    "dataset":              "synthetic",
    "images":               200,
    "seed":                 1,

    # Synthetic data and training
    "classes":              2,
    "image_size":           16,
    "train_per_class":      200,
    "train_epochs":         30,
    "adv_eps":              0.0,       # > 0 switches to adversarial training
    "adv_pgd_steps":        5,

    # White box (BP)
    "wb_budget":            100,       # K, gradient calls per image
    "wb_quantization":      "post",    # post | per_step
    "wb_curve":             True,      # re-run BP at K/8, K/4, K/2 for budget curves
    "pgd_compare":          False,     # best-effort PGD at the same budgets
    "bp_pull":              0.1,
    "bp_margin":            1e-3,      # fraction of the initial loss

    # Black box
    "bb_queries":           5000,
    "bb_quantization":      "per_query",   # per_query | post
    "bb_curve_points":      10,
    "bb_thetas":            "15,30,45",    # degrees, tried with both signs
    "bb_dct_fraction":      0.25,
    "bb_init_draws":        100,
    "bb_init_bisections":   10,
    "bb_refine_steps":      5,

    # Fitting and execution
    "grid_points":          50,
    "workers":              1,
    "out":                  None,
}

REQUIRED_KEYS: tuple[str, ...] = ("out",)

CHOICES: dict[str, tuple[str, ...]] = {
    "wb_quantization": ("post", "per_step"),
    "bb_quantization": ("per_query", "post"),
}

# Keys that must be strictly positive / non-negative
POSITIVE_KEYS: tuple[str, ...] = (
    "images", "classes", "image_size", "train_per_class", "train_epochs",
    "wb_budget", "bb_queries", "bb_curve_points", "bb_dct_fraction",
    "bb_init_draws", "grid_points", "workers",
)
NON_NEGATIVE_KEYS: tuple[str, ...] = (
    "adv_eps", "adv_pgd_steps", "bp_pull", "bp_margin",
    "bb_init_bisections", "bb_refine_steps",
)


# ---------------------------------------------------------------------------
# Attack constants
# ---------------------------------------------------------------------------
BP_DEFAULTS: dict = {
    "pull":           0.1,
    "margin":         1e-3,
    "repair_steps":   20,
    "repair_growth":  0.05,
}

PGD_LADDER_DEFAULTS: dict = {
    "start":       0.125,   # pixel-level RMSE
    "ratio":       2.0,
    "rungs":       12,
    "refinement":  8,
}

BLACKBOX_DEFAULTS: dict = {
    "max_queries":       5000,
    "init_draws":        100,
    "init_bisections":   10,
    "refine_steps":      5,
    "thetas":            (15.0, 30.0, 45.0),
    "dct_fraction":      0.25,
    "scale_floor":       1.0 / 64.0,
}

REPORT_SCHEMA_VERSION = 1
