"""Series-type classification toolkit for 3D MRI-like volumes.

Core pieces: a small volume format with manifests, a preprocessing
pipeline, a reverse-mode autodiff engine with 3D CNN primitives, DenseNet
and ResNet classifiers, cross-validated training with fold ensembling,
evaluation statistics, GradCAM saliency, and a synthetic phantom
generator. The ``mriseq`` command exposes the experiment protocols.
"""

from .errors import (CheckpointError, DataError, ManifestError, MriseqError,
                     NumericError, UsageError, VolumeFormatError)
from .gradcam import SaliencyVolume, export_overlay, gradcam
from .inference import (Prediction, predict_proba, predict_study,
                        read_predictions_csv, write_predictions_csv)
from .metrics import (ConfusionMatrix, MetricReport, MetricValue, auc_ovr,
                      bootstrap_ci, chi2_sf_1df, compute_report, confusion,
                      mcnemar, per_class_metrics, write_report)
from .models import (EnsembleModel, ModelConfig, build_model,
                     count_parameters, load_checkpoint, save_checkpoint)
from .optim import Adam, grad_check
from .phantom import (INTENSITY_TABLE, DomainProfile, PhantomConfig,
                      generate_dataset, generate_study)
from .preprocess import (TOY_TARGET_DIMS, PreprocessConfig, clip_percentiles,
                         crop_or_pad, percentile, preprocess_pipeline,
                         resample, trilinear_resize)
from .training import (FoldSplit, TrainConfig, load_preprocessed,
                       split_patient_level, subset_fraction, train_cv,
                       train_fold)
from .volume import (CANONICAL_ORIENTATION, LABELS, NUM_CLASSES,
                     DatasetManifest, SeriesLabel, SeriesRecord, Volume3D,
                     load_manifest, read_volume, reorient, save_manifest,
                     write_volume)

__version__ = "1.0.0"
