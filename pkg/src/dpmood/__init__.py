"""dpMood: temporal convolution + bidirectional GRU + per-subject sine
calibration for mood-score regression from keystroke and accelerometer
sessions, with baselines, a synthetic cohort generator and exploratory
statistics."""

__version__ = "0.1.0"
