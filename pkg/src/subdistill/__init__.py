"""Subclass distillation at desk scale.

A teacher invents subclasses under class-level supervision via a contrastive
auxiliary loss; a student is distilled from the subclass probabilities; a
diagnostic toolkit measures how well the invented subclasses match hidden
ground truth.

Modules:
    netcore   tensors, layers, networks, exact reverse-mode gradients,
              checkpoint serialization
    losses    class/subclass cross-entropies, distillation variants, the
              contrastive auxiliary loss
    metrics   permutation-matched subclass accuracy, effective label bits,
              entropy diagnostics, nearest-neighbor probe
    data      IDX parsing, binary digit grouping, synthetic Gaussian
              mixture, seeded minibatches
    training  optimizers, schedules, teacher/student training loops
    cli       the `subdistill` command-line interface
"""

from .data import (DatasetSpec, LabeledBatch, group_binary, load_dataset,
                   load_idx, minibatches, normalize_pixels, save_idx,
                   synth_gaussian_mixture)
from .losses import (aux_loss, class_marginal, distill_conventional,
                     distill_subclass, intra_class_distill,
                     intra_class_softmax, normalize_logit_vector,
                     penultimate_distill, student_loss, subclass_softmax,
                     teacher_loss, xent_class)
from .metrics import (MetricReport, best_permutation_accuracy, confusion,
                      dead_subclass_count, effective_label_bits, knn_probe,
                      mean_prediction_entropy, utilization_entropy)
from .netcore import (Network, backward, build_network, finite_diff_check,
                      forward, load_checkpoint, save_checkpoint)
from .training import (OptimizerConfig, RunConfig, ScheduleConfig, TrainLog,
                       adam_step, distill_student, evaluate, lr_at,
                       sgd_nesterov_step, train_teacher)

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec", "LabeledBatch", "group_binary", "load_dataset", "load_idx",
    "minibatches", "normalize_pixels", "save_idx", "synth_gaussian_mixture",
    "aux_loss", "class_marginal", "distill_conventional", "distill_subclass",
    "intra_class_distill", "intra_class_softmax", "normalize_logit_vector",
    "penultimate_distill", "student_loss", "subclass_softmax", "teacher_loss",
    "xent_class",
    "MetricReport", "best_permutation_accuracy", "confusion",
    "dead_subclass_count", "effective_label_bits", "knn_probe",
    "mean_prediction_entropy", "utilization_entropy",
    "Network", "backward", "build_network", "finite_diff_check", "forward",
    "load_checkpoint", "save_checkpoint",
    "OptimizerConfig", "RunConfig", "ScheduleConfig", "TrainLog", "adam_step",
    "distill_student", "evaluate", "lr_at", "sgd_nesterov_step",
    "train_teacher",
]
