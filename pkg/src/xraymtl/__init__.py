"""Multi-task X-ray toy lab: shared encoder, three task heads, staged
training protocol, synthetic data and an evaluation harness."""

__version__ = "0.1.0"

from .data import (Box, Dataset, ImageBatch, LabelBundle, SyntheticConfig,
                   box_from_mask, derive_classification_labels,
                   generate_synthetic, load_dataset, save_dataset)
from .model import ArchConfig, EncodedFeatures, ModelParams, classify, detect, encode, init_params, load_params, save_params, segment
from .losses import MatchMatrix, loss_cls, loss_det, loss_seg, loss_total, match_anchors
from .pipeline import (Diagnosis, TeacherForcer, TeacherForcingConfig,
                       filter_positives, infer_pipeline, postprocess_boxes,
                       teacher_force_select)
from .train import (Adam, PhaseReport, ProtocolConfig, TrainConfig,
                    pretrain_classifier, pretrain_detection,
                    pretrain_segmentation, run_protocol, train_mtl_alternating,
                    train_mtl_joint, train_step)
from .transfer import ClsFactorization, factorize_cls_params, finetune_new_disease
from .metrics import (EvalReport, accuracy, bootstrap_ci, dice, evaluate, f1,
                      mean_average_precision)
