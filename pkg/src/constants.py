# src/constants.py
# File names and presets shared by the CLI, trainer and evaluation code.

# Output artefacts inside a run directory
RESOLVED_CONFIG = "resolved_config.yaml"
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "model.npz"
DETECTIONS_FILE = "detections.json"
SCORES_DIR = "scores"
REPORT_FILE = "psds_report.json"
ROC_FILE = "roc.jsonl"
ROC_PLOT = "roc.svg"
TIMELINE_DIR = "timelines"
SWEEP_TABLE = "query_sweep.jsonl"
SWEEP_PLOT = "query_sweep.svg"

# Query-duration sweep (seconds of exemplar audio per novel class)
DEFAULT_SWEEP_DURATIONS = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)

# Deeper fine-branch CNN: ten 3x3 blocks, frequency halved every other block.
CNN_10_CHANNELS = (16, 16, 32, 32, 64, 64, 128, 128, 128, 128)
CNN_10_FREQ_POOL = (2, 1, 2, 1, 2, 1, 2, 1, 1, 1)
CNN_10_TIME_POOL = (2, 1, 1, 1, 1, 1, 1, 1, 1, 1)

CNN_PRESETS = {
    "cnn4": {"cnn_channels": (16, 32, 64, 128), "cnn_freq_pool": (2, 2, 2, 2), "cnn_time_pool": (2, 1, 1, 1)},
    "cnn10": {"cnn_channels": CNN_10_CHANNELS, "cnn_freq_pool": CNN_10_FREQ_POOL, "cnn_time_pool": CNN_10_TIME_POOL},
}

# Exit codes
EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_VALIDATION_ERROR = 2
