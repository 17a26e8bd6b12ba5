"""Point-supervised camouflage segmentation toolkit."""

from .core import (BG, FG, UNLABELED, CircleRegion, PointAnnotation,
                   PredictionMap, Scene, SupervisionMask, rasterize_circle,
                   validate_supervision)
from .hints import (HintConfig, HintResult, estimate_radius, expand_points,
                    generate_hint_supervision, initial_square_supervision)
from .regulator import RegulatorConfig, apply_mask, build_mask
from .contrastive import (AugPair, TransformSpec, align_prediction,
                          apply_transform, contrastive_loss, sample_pair,
                          transform_supervision)
from .losses import LossReport, partial_ce, total_loss
from .metrics import (MetricReport, compute_all, e_measure, evaluate_pairs,
                      mae, s_measure, weighted_f_beta)
from .model import (EncoderConfig, ModelState, SegmentationNet, build_net,
                    load_checkpoint, predict_map, save_checkpoint)
from .synth import (AnnotationMode, Corpus, SceneSpec, generate_corpus,
                    generate_scene, load_corpus, save_corpus,
                    simulate_annotation)
from .config import ContrastiveConfig, RunConfig, apply_overrides, load_config
from .pipeline import (RunReport, TrainingDiverged, evaluate_model,
                       hint_stage, main_train, run_experiment, triangular_lr,
                       warmup)
from .ablation import AblationReport, run_ablation

__version__ = "0.1.0"
