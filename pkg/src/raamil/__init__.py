"""Weakly supervised patient-level classification on cached token grids.

The pipeline: refine each patch's token grid by neighborhood affinity
(`raa`), pool every token of a bag with gated attention and classify
(`mil`), train per fold with a class-weighted focal loss (`objective`,
`optim`, `trainer`), and evaluate with tie-exact metrics plus
prediction-averaging ensembles (`metrics`).  `bags`/`manifest` define the
on-disk token and dataset formats, `synthetic` generates labeled test
corpora, and `cli` wires everything into reproducible commands.
"""

from raamil.autodiff import (Graph, GraphError, NonFiniteError, ShapeError,
                             backward, finite_diff_grad, forward)
from raamil.bags import (CLASS_NAMES, NUM_CLASSES, BagFormatError, GridTokens,
                         TokenBag, read_bag, write_bag)
from raamil.folds import FoldError, FoldPlan, load_fold_plan, save_fold_plan, stratified_kfold
from raamil.manifest import (DatasetManifest, ManifestError, PatientEntry,
                             ValidationReport, load_manifest, save_manifest,
                             validate_manifest)
from raamil.metrics import (CoreMetrics, MetricsError, MetricsReport, compute_report,
                            confusion_and_f1, ensemble_average, export_attention_map,
                            format_mean_std, pr_auc_per_class, roc_auc_ovr_weighted)
from raamil.mil import (BagForward, Checkpoint, CheckpointError, MilParams,
                        build_bag_graph, classify, forward_bag,
                        gated_attention_weights, init_mil_params, load_checkpoint,
                        param_dict, pool_bag, save_checkpoint)
from raamil.objective import (LossConfig, class_weights_from_counts, focal_loss,
                              smoothed_target)
from raamil.optim import (AdamWState, EarlyStopState, PlateauState, adamw_step,
                          clip_gradients, early_stop_update, init_adamw, plateau_update)
from raamil.raa import (NeighborhoodIndex, RaaParams, affinity_weights,
                        build_neighborhood, init_raa_params,
                        pairwise_neighbor_distances, refine_tokens)
from raamil.rng import Stream, derive_seed, stream
from raamil.synthetic import (SynthConfig, generate_synthetic_dataset, make_bag,
                              make_test_split)
from raamil.trainer import (CvResult, RunHistory, TrainConfig, TrainingError,
                            predict, run_cv, train_fold)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
