"""Prototype-based generalized category discovery on fixed embeddings.

The package trains a unit-sphere prototype classifier on partially labeled
embedding data with adaptive pseudo-labeling and regularized contrastive
objectives, estimates the number of new classes, evaluates clustering
accuracy, and scores out-of-distribution inputs.
"""

from .dataset import (EmbeddingDataset, SyntheticConfig, ViewPair,
                      generate_ood, generate_synthetic, load_dataset,
                      make_views, save_dataset, split_gcd)
from .dapl import (DaplEpochState, PseudoLabel, assign_pseudo_label,
                   epoch_threshold, proto_confidence, ramp_ratio)
from .errors import (ConfigError, DataFormatError, IntegrityError,
                     NonFiniteError, ProtoGcdError, UndefinedLossError)
from .estimation import (ScoreTriple, acc_score, centr_score, estimate_k,
                         proto_score)
from .evaluation import (AccReport, EvalReport, clustering_accuracy,
                         compactness, evaluate, hungarian, separation_metric,
                         typicality_rank)
from .model import (ForwardOutputs, ModelParams, embed, forward, init_params,
                    load_checkpoint, save_checkpoint)
from .objectives import (BatchTargets, LossBreakdown, TrainingBatch,
                         dapl_loss, entropy_reg, separation_reg,
                         sup_contrastive, supervised_ce, total_objective,
                         unsup_contrastive)
from .ood import (OodReport, aupr_in, auroc, energy_score, fpr_at_tpr,
                  mls_score, msp_score, ood_report)
from .optimizer import OptimizerConfig, SgdOptimizer, cosine_lr, finite_diff_check
from .sphere import (VmfComponent, cosine, entropy, normalize, sample_vmf,
                     tempered_softmax)
from .trainer import TrainConfig, TrainHistory, train, train_epoch

__version__ = "0.1.0"
