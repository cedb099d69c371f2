from .augment import DEFAULTS, KINDS, AugmentationSkipped, augment
from .battery import MetricReport, read_reports, reports_csv, reports_json, run_battery, score, write_reports
from .metrics import edit_distance, sim, snr, wer

__all__ = [
    "DEFAULTS", "KINDS", "AugmentationSkipped", "MetricReport", "augment", "edit_distance",
    "read_reports", "reports_csv", "reports_json", "run_battery", "score", "sim", "snr", "wer",
    "write_reports",
]
