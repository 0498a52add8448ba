"""salign: adversarially robust classifiers via teacher-guided saliency alignment.

Phase 1 aligns the student's input-gradient saliency to a pre-trained robust
teacher's (discriminator + squared-L2 losses); phase 2 refines the student
against top-k masked teacher saliency with k shrinking on a curriculum.
Includes the FGSM/PGD attack suite and alignment diagnostics used to
evaluate the result.
"""

from .attacks import AttackSpec, delta_image, fgsm, pgd, project_linf
from .config import CurriculumSchedule, ExperimentConfig, load_config
from .data import load_dataset
from .harness import run_experiment
from .losses import (LossBreakdown, ce_loss, curr_diff_loss, curr_robust_loss,
                     diff_loss, phase1_objective, phase2_objective, robust_loss)
from .metrics import (RobustnessReport, accuracy, alignment,
                      binarized_alignment, emit_report, linearized_robustness,
                      load_report)
from .models import (Classifier, Discriminator, build_discriminator,
                     build_student, load_classifier, load_teacher, save_model)
from .saliency import (SaliencyMap, normalize_for_disc, saliency_ce,
                       saliency_true_class, top_k_mask)
from .trainer import (LrSchedule, bootstrap_teacher, lr_at, train_phase1,
                      train_phase2)

__version__ = "0.1.0"
