"""Published reference results, kept as metadata.

These come from full-scale training on licensed datasets (CK+, FER2013,
NovaEmotions, CASME II) and are not asserted anywhere.  Each entry names the
harness metric that reproduces it when the data is supplied.
"""

PAPER_REFERENCE = {
    "ck_emotion_10fold": {"value": 0.9862, "std": 0.0011, "metric": "eval --folds 10: accuracy_mean/accuracy_std"},
    "fer2013_emotion": {"value": 0.721, "std": 0.005, "metric": "eval --folds 10: accuracy_mean/accuracy_std"},
    "au_binary_accuracy": {"value": 0.9754, "metric": "eval (au-binary head): accuracy"},
    "au_intensity_accuracy": {"value": 0.961, "metric": "eval (au-intensity head): accuracy"},
    "au_intensity_mse": {"value": 0.2045, "metric": "eval (au-intensity head): mse"},
    # train set -> test set
    "cross_dataset": {
        ("CK+", "CK+"): 0.9862, ("CK+", "FER2013"): 0.693, ("CK+", "NovaEmotions"): 0.672,
        ("FER2013", "CK+"): 0.920, ("FER2013", "FER2013"): 0.721, ("FER2013", "NovaEmotions"): 0.780,
        ("NovaEmotions", "CK+"): 0.9375, ("NovaEmotions", "FER2013"): 0.718, ("NovaEmotions", "NovaEmotions"): 0.813,
    },
    "casme2_micro_loso": {"value": 0.5947, "metric": "micro-eval: mean"},
    "conv3_active_filters": {"value": 60, "of": 256, "metric": "correlate: census active count"},
    "au_correlations_rejected": {"value": 7, "of": 50, "metric": "correlate: rejected filters"},
}
